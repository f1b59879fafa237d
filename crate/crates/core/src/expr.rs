//! Closed-form field expressions.
//!
//! Grammar: arithmetic `+ - * / ^ %`, comparisons (yielding 1 or 0),
//! `sin cos tan abs sign floor ceil log min max pi()` from the evaluator plus
//! `exp(a)`, `sqrt(a)` and `piecewise(cond, a, b)`. Variables are `x`, `y`
//! (lateral axes), `z` (transversal) and `xp`, `yp`, `zp` for the second
//! argument of a kernel. Unary minus binds tighter than `^`, so `-x^2`
//! is `(-x)^2`; write `-(x^2)`.

use fasteval::{Compiler, Evaler};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evaluation point; unused coordinates are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub xp: f64,
    pub yp: f64,
    pub zp: f64,
}

impl Point {
    /// Point from node coordinates (lateral axes first, transversal last when `layer`).
    pub fn from_coords(c: &[f64], lateral_dim: usize, layer: bool) -> Self {
        let mut p = Point::default();
        p.x = c[0];
        if lateral_dim > 1 {
            p.y = c[1];
        }
        if layer {
            p.z = c[lateral_dim];
        }
        p
    }

    pub fn with_second(mut self, q: Point) -> Self {
        self.xp = q.x;
        self.yp = q.y;
        self.zp = q.z;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Expr {
    source: String,
}

pub struct Evaluator {
    slab: fasteval::Slab,
    compiled: fasteval::Instruction,
    source: String,
}

fn namespace(p: Point) -> impl FnMut(&str, Vec<f64>) -> Option<f64> {
    move |name, args| match (name, args.as_slice()) {
        ("x", []) => Some(p.x),
        ("y", []) => Some(p.y),
        ("z", []) => Some(p.z),
        ("xp", []) => Some(p.xp),
        ("yp", []) => Some(p.yp),
        ("zp", []) => Some(p.zp),
        ("exp", [a]) => Some(a.exp()),
        ("sqrt", [a]) => Some(a.sqrt()),
        ("piecewise", [c, a, b]) => Some(if *c != 0.0 { *a } else { *b }),
        _ => None,
    }
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let e = Expr { source: source.to_string() };
        e.evaluator()?.eval(Point::default())?;
        Ok(e)
    }

    pub fn constant(c: f64) -> Self {
        Expr { source: format!("{c:?}") }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn evaluator(&self) -> Result<Evaluator> {
        let err = |e: fasteval::Error| Error::Expression { expr: self.source.clone(), msg: e.to_string() };
        let mut slab = fasteval::Slab::new();
        let parsed = fasteval::Parser::new().parse(&self.source, &mut slab.ps).map_err(err)?;
        let compiled = parsed.from(&slab.ps).compile(&slab.ps, &mut slab.cs);
        Ok(Evaluator { slab, compiled, source: self.source.clone() })
    }

    /// Evaluates once; prefer [`Expr::evaluator`] in loops.
    pub fn eval(&self, p: Point) -> Result<f64> {
        self.evaluator()?.eval(p)
    }
}

impl Evaluator {
    pub fn eval(&self, p: Point) -> Result<f64> {
        let mut ns = namespace(p);
        let v = self
            .compiled
            .eval(&self.slab, &mut ns)
            .map_err(|e| Error::Expression { expr: self.source.clone(), msg: e.to_string() })?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Expression { expr: self.source.clone(), msg: format!("non-finite value {v}") })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(x: f64) -> Point {
        Point { x, ..Point::default() }
    }

    #[test]
    fn evaluates_trig_and_constants() {
        let e = Expr::parse("cos(2*pi()*x)").unwrap();
        assert!((e.eval(at(0.25)).unwrap()).abs() < 1e-15);
        assert_eq!(Expr::parse("-1").unwrap().eval(at(0.3)).unwrap(), -1.0);
    }

    #[test]
    fn division_is_real() {
        assert_eq!(Expr::parse("1/2").unwrap().eval(at(0.0)).unwrap(), 0.5);
    }

    #[test]
    fn piecewise_and_exp() {
        let e = Expr::parse("piecewise(x < 0.5, exp(x), 0)").unwrap();
        assert!((e.eval(at(0.2)).unwrap() - 0.2f64.exp()).abs() < 1e-15);
        assert_eq!(e.eval(at(0.7)).unwrap(), 0.0);
    }

    #[test]
    fn kernel_variables() {
        let e = Expr::parse("x*xp + z - zp").unwrap();
        let p = Point { x: 2.0, z: 1.0, ..Point::default() }.with_second(Point { x: 3.0, z: 0.5, ..Point::default() });
        assert_eq!(e.eval(p).unwrap(), 6.5);
    }

    #[test]
    fn unary_minus_precedence() {
        assert_eq!(Expr::parse("-2^2").unwrap().eval(at(0.0)).unwrap(), 4.0);
        assert_eq!(Expr::parse("-(2^2)").unwrap().eval(at(0.0)).unwrap(), -4.0);
    }

    #[test]
    fn rejects_garbage_and_unknown_names() {
        assert!(Expr::parse("cos(").is_err());
        assert!(Expr::parse("w + 1").is_err());
    }
}
