//! Hierarchical composition models: tree-structured compositions of smooth
//! low-arity functions, used both as ground truth for data generation and
//! as the compilation source for the encoder constructions.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Closed interval for range propagation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi);
        Interval { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn symmetric(r: f64) -> Self {
        Interval { lo: -r, hi: r }
    }

    pub fn max_abs(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn hull(&self, other: Interval) -> Interval {
        Interval {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    pub fn add(&self, other: Interval) -> Interval {
        Interval {
            lo: self.lo + other.lo,
            hi: self.hi + other.hi,
        }
    }

    pub fn offset(&self, c: f64) -> Interval {
        Interval {
            lo: self.lo + c,
            hi: self.hi + c,
        }
    }

    pub fn mul(&self, other: Interval) -> Interval {
        let cands = [
            self.lo * other.lo,
            self.lo * other.hi,
            self.hi * other.lo,
            self.hi * other.hi,
        ];
        Interval {
            lo: cands.iter().copied().fold(f64::INFINITY, f64::min),
            hi: cands.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn scale(&self, c: f64) -> Interval {
        if c >= 0.0 {
            Interval {
                lo: self.lo * c,
                hi: self.hi * c,
            }
        } else {
            Interval {
                lo: self.hi * c,
                hi: self.lo * c,
            }
        }
    }

    pub fn relu(&self) -> Interval {
        Interval {
            lo: self.lo.max(0.0),
            hi: self.hi.max(0.0),
        }
    }
}

type EvalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A smooth component function with declared smoothness metadata.
///
/// The smoothness p = q + s with s in (0, 1] is declared, not verified
/// symbolically; `spot_check_lipschitz` validates the Lipschitz declaration
/// on random pairs.
#[derive(Clone)]
pub struct SmoothFn {
    pub name: String,
    pub arity: usize,
    pub p: f64,
    pub c_lip: f64,
    /// Sup-norm bound on derivatives up to order q.
    pub deriv_bound: f64,
    eval: EvalFn,
}

impl fmt::Debug for SmoothFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothFn")
            .field("name", &self.name)
            .field("arity", &self.arity)
            .field("p", &self.p)
            .field("c_lip", &self.c_lip)
            .finish()
    }
}

impl SmoothFn {
    pub fn new(
        name: impl Into<String>,
        arity: usize,
        p: f64,
        c_lip: f64,
        deriv_bound: f64,
        eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        assert!(arity >= 1 && p > 0.0 && c_lip >= 1.0);
        SmoothFn {
            name: name.into(),
            arity,
            p,
            c_lip,
            deriv_bound,
            eval: Arc::new(eval),
        }
    }

    pub fn eval(&self, args: &[f64]) -> f64 {
        debug_assert_eq!(args.len(), self.arity);
        (self.eval)(args)
    }

    /// Integer part q of the smoothness p = q + s with s in (0, 1].
    pub fn q(&self) -> usize {
        (self.p.ceil() as usize).saturating_sub(1)
    }
}

/// Node of a hierarchical composition model. Leaves read one coordinate of
/// the flattened input x in R^{d*l}; composites apply a smooth function to
/// their children.
#[derive(Debug, Clone)]
pub enum HcmNode {
    /// 1-based coordinate index into the flattened input.
    Leaf { coord: usize },
    Composite { g: SmoothFn, children: Vec<HcmNode> },
}

impl HcmNode {
    pub fn leaf(coord: usize) -> Self {
        assert!(coord >= 1);
        HcmNode::Leaf { coord }
    }

    pub fn composite(g: SmoothFn, children: Vec<HcmNode>) -> Self {
        assert_eq!(g.arity, children.len());
        HcmNode::Composite { g, children }
    }

    pub fn level(&self) -> usize {
        match self {
            HcmNode::Leaf { .. } => 0,
            HcmNode::Composite { children, .. } => {
                1 + children.iter().map(|c| c.level()).max().unwrap_or(0)
            }
        }
    }

    pub fn max_leaf_coord(&self) -> usize {
        match self {
            HcmNode::Leaf { coord } => *coord,
            HcmNode::Composite { children, .. } => {
                children.iter().map(|c| c.max_leaf_coord()).max().unwrap_or(0)
            }
        }
    }

    /// All (p, K) pairs of the composites in this tree.
    pub fn smoothness_pairs(&self) -> Vec<(f64, usize)> {
        let mut out = Vec::new();
        self.visit_composites(&mut |g, _| out.push((g.p, g.arity)));
        out
    }

    pub fn visit_composites(&self, f: &mut impl FnMut(&SmoothFn, &[HcmNode])) {
        if let HcmNode::Composite { g, children } = self {
            for c in children {
                c.visit_composites(f);
            }
            f(g, children);
        }
    }
}

/// Recursive evaluation; a leaf returns the addressed coordinate.
pub fn eval_hcm(node: &HcmNode, x: &[f64]) -> Result<f64> {
    match node {
        HcmNode::Leaf { coord } => {
            if *coord > x.len() {
                return Err(Error::IndexOutOfRange {
                    context: "leaf coordinate".into(),
                    index: *coord,
                    limit: x.len(),
                });
            }
            Ok(x[*coord - 1])
        }
        HcmNode::Composite { g, children } => {
            let args: Vec<f64> = children
                .iter()
                .map(|c| eval_hcm(c, x))
                .collect::<Result<_>>()?;
            Ok(g.eval(&args))
        }
    }
}

/// Submodel counts per level: counts[i-1] holds the number of composite
/// submodels of level i. The top level always has exactly one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HcmLayout {
    pub counts: Vec<usize>,
}

impl HcmLayout {
    /// Total number of composite blocks: the copy budget the compiler needs.
    pub fn total_blocks(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn layout(node: &HcmNode) -> HcmLayout {
    let top = node.level();
    let mut counts = vec![0usize; top];
    fn walk(node: &HcmNode, counts: &mut [usize]) {
        if let HcmNode::Composite { children, .. } = node {
            counts[node.level() - 1] += 1;
            for c in children {
                walk(c, counts);
            }
        }
    }
    walk(node, &mut counts);
    HcmLayout { counts }
}

/// Interval-propagated range bound: every submodel value on [-A, A]^{d*l}
/// lies in [-range_bound, range_bound]. Composites are bounded through the
/// Lipschitz declaration around the midpoint of the child intervals.
pub fn range_bound(node: &HcmNode, a: f64) -> f64 {
    assert!(a >= 1.0);
    node_interval(node, a).max_abs().max(a)
}

pub fn node_interval(node: &HcmNode, a: f64) -> Interval {
    match node {
        HcmNode::Leaf { .. } => Interval::symmetric(a),
        HcmNode::Composite { g, children } => {
            let child_ints: Vec<Interval> = children.iter().map(|c| node_interval(c, a)).collect();
            let mid: Vec<f64> = child_ints.iter().map(|i| (i.lo + i.hi) / 2.0).collect();
            let spread: f64 = child_ints.iter().map(|i| (i.hi - i.lo) / 2.0).sum();
            let center = g.eval(&mid);
            let r = g.c_lip * spread;
            Interval::new(center - r, center + r)
        }
    }
}

/// Finite-difference spot check of the declared Lipschitz constant on
/// random argument pairs inside [-a, a]^arity.
pub fn spot_check_lipschitz(g: &SmoothFn, a: f64, pairs: usize, seed: u64) -> bool {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..pairs {
        let x: Vec<f64> = (0..g.arity).map(|_| rng.gen_range(-a..=a)).collect();
        let y: Vec<f64> = (0..g.arity).map(|_| rng.gen_range(-a..=a)).collect();
        let dist: f64 = x.iter().zip(&y).map(|(u, v)| (u - v).abs()).sum();
        if (g.eval(&x) - g.eval(&y)).abs() > g.c_lip * dist + 1e-12 {
            return false;
        }
    }
    true
}

/// A named HCM instance with its input geometry.
#[derive(Debug, Clone)]
pub struct HcmInstance {
    pub name: &'static str,
    pub description: &'static str,
    /// Token dimension and sequence length; ambient dimension is d * l.
    pub d: usize,
    pub l: usize,
    /// Domain half-width A.
    pub a: f64,
    pub node: HcmNode,
}

impl HcmInstance {
    pub fn ambient_dim(&self) -> usize {
        self.d * self.l
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        eval_hcm(&self.node, x)
    }
}

fn sine_product_2d() -> SmoothFn {
    SmoothFn::new(
        "0.5 + 0.4 sin(1.5a) cos(1.5b)",
        2,
        2.0,
        1.0,
        0.9,
        |v: &[f64]| 0.5 + 0.4 * (1.5 * v[0]).sin() * (1.5 * v[1]).cos(),
    )
}

/// Catalog of named HCM instances used by the experiments.
pub fn builtin_library() -> Vec<HcmInstance> {
    let smooth_1d = SmoothFn::new("0.5 + 0.4 sin(2a)", 1, 2.0, 1.0, 1.6, |v: &[f64]| {
        0.5 + 0.4 * (2.0 * v[0]).sin()
    });
    let additive = SmoothFn::new(
        "0.5 + 0.2(sin(1.2a) + cos(1.2b))",
        2,
        2.0,
        1.0,
        0.6,
        |v: &[f64]| 0.5 + 0.2 * ((1.2 * v[0]).sin() + (1.2 * v[1]).cos()),
    );
    let half_sum = SmoothFn::new("(a+b)/2", 2, 2.0, 1.0, 1.0, |v: &[f64]| (v[0] + v[1]) / 2.0);
    let half_diff = SmoothFn::new("(a-b)/2", 2, 2.0, 1.0, 1.0, |v: &[f64]| (v[0] - v[1]) / 2.0);
    let sine_top = SmoothFn::new(
        "0.5 + 0.4 sin(u) cos(v)",
        2,
        2.0,
        1.0,
        0.9,
        |v: &[f64]| 0.5 + 0.4 * v[0].sin() * v[1].cos(),
    );

    vec![
        HcmInstance {
            name: "smooth-1d",
            description: "level-1 univariate (2,C)-smooth target",
            d: 1,
            l: 1,
            a: 1.0,
            node: HcmNode::composite(smooth_1d, vec![HcmNode::leaf(1)]),
        },
        HcmInstance {
            name: "additive-2d",
            description: "level-1 additive model of two smooth univariate pieces",
            d: 2,
            l: 1,
            a: 1.0,
            node: HcmNode::composite(additive, vec![HcmNode::leaf(1), HcmNode::leaf(2)]),
        },
        HcmInstance {
            name: "product-2d",
            description: "level-1 bivariate (2,C)-smooth target on ambient dimension 4",
            d: 2,
            l: 2,
            a: 1.0,
            node: HcmNode::composite(sine_product_2d(), vec![HcmNode::leaf(1), HcmNode::leaf(2)]),
        },
        HcmInstance {
            name: "level-2",
            description: "two-level composition: smooth top over two linear mixes",
            d: 2,
            l: 2,
            a: 1.0,
            node: HcmNode::composite(
                sine_top,
                vec![
                    HcmNode::composite(half_sum, vec![HcmNode::leaf(1), HcmNode::leaf(2)]),
                    HcmNode::composite(half_diff, vec![HcmNode::leaf(3), HcmNode::leaf(4)]),
                ],
            ),
        },
        HcmInstance {
            name: "high-ambient",
            description: "same bivariate target embedded in ambient dimension 20",
            d: 4,
            l: 5,
            a: 1.0,
            node: HcmNode::composite(sine_product_2d(), vec![HcmNode::leaf(1), HcmNode::leaf(2)]),
        },
    ]
}

pub fn find_builtin(name: &str) -> Result<HcmInstance> {
    builtin_library()
        .into_iter()
        .find(|m| m.name == name)
        .ok_or_else(|| Error::UnknownModel(name.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn leaf_reads_coordinate() {
        let x = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(eval_hcm(&HcmNode::leaf(3), &x).unwrap(), 0.3);
        assert!(eval_hcm(&HcmNode::leaf(5), &x).is_err());
    }

    #[test]
    fn composite_product() {
        let prod = SmoothFn::new("a*b", 2, 2.0, 2.0, 1.0, |v: &[f64]| v[0] * v[1]);
        let node = HcmNode::composite(prod, vec![HcmNode::leaf(1), HcmNode::leaf(2)]);
        let v = eval_hcm(&node, &[0.5, 0.4]).unwrap();
        assert!((v - 0.2).abs() < 1e-15);
    }

    #[test]
    fn two_level_sum_then_product() {
        // g2(g1(x1,x2), x3) with g1 = sum, g2 = product, x = (1,2,3) -> 9
        let sum = SmoothFn::new("a+b", 2, 2.0, 1.0, 1.0, |v: &[f64]| v[0] + v[1]);
        let prod = SmoothFn::new("a*b", 2, 2.0, 4.0, 1.0, |v: &[f64]| v[0] * v[1]);
        let node = HcmNode::composite(
            prod,
            vec![
                HcmNode::composite(sum, vec![HcmNode::leaf(1), HcmNode::leaf(2)]),
                HcmNode::leaf(3),
            ],
        );
        assert_eq!(eval_hcm(&node, &[1.0, 2.0, 3.0]).unwrap(), 9.0);
    }

    #[test]
    fn layout_counts() {
        let sum = SmoothFn::new("a+b", 2, 2.0, 1.0, 1.0, |v: &[f64]| v[0] + v[1]);
        let single = HcmNode::composite(sum.clone(), vec![HcmNode::leaf(1), HcmNode::leaf(2)]);
        assert_eq!(layout(&single).counts, vec![1]);
        assert_eq!(layout(&single).total_blocks(), 1);

        let two_level = HcmNode::composite(
            sum.clone(),
            vec![
                HcmNode::composite(sum.clone(), vec![HcmNode::leaf(1), HcmNode::leaf(2)]),
                HcmNode::composite(sum.clone(), vec![HcmNode::leaf(3), HcmNode::leaf(4)]),
            ],
        );
        let lay = layout(&two_level);
        assert_eq!(lay.counts, vec![2, 1]);
        assert_eq!(lay.total_blocks(), 3);

        // invariance under child reordering
        let reordered = HcmNode::composite(
            sum.clone(),
            vec![
                HcmNode::composite(sum.clone(), vec![HcmNode::leaf(3), HcmNode::leaf(4)]),
                HcmNode::composite(sum, vec![HcmNode::leaf(2), HcmNode::leaf(1)]),
            ],
        );
        assert_eq!(layout(&reordered), lay);
    }

    #[test]
    fn layout_satisfies_count_recursion_for_uniform_trees() {
        // For a uniform-depth tree the recursion counts[i-1] = sum of child
        // arities over level-(i+1) composites holds.
        let sum = SmoothFn::new("a+b", 2, 2.0, 1.0, 1.0, |v: &[f64]| v[0] + v[1]);
        let tri = SmoothFn::new("a+b+c", 3, 2.0, 1.0, 1.0, |v: &[f64]| v.iter().sum());
        let lvl1 = |c: usize| HcmNode::composite(sum.clone(), vec![HcmNode::leaf(c), HcmNode::leaf(c + 1)]);
        let tree = HcmNode::composite(tri, vec![lvl1(1), lvl1(3), lvl1(5)]);
        let lay = layout(&tree);
        assert_eq!(lay.counts, vec![3, 1]);
        // top level count is 1 and counts[0] equals the top arity
        assert_eq!(*lay.counts.last().unwrap(), 1);
        assert_eq!(lay.counts[0], 3);
    }

    #[test]
    fn range_bound_examples() {
        assert_eq!(range_bound(&HcmNode::leaf(1), 1.0), 1.0);
        let prod = SmoothFn::new("a*b", 2, 2.0, 4.0, 1.0, |v: &[f64]| v[0] * v[1]);
        let node = HcmNode::composite(prod, vec![HcmNode::leaf(1), HcmNode::leaf(2)]);
        // Lipschitz propagation: g(0,0)=0, radius 4 * (2+2) = 16 >= true 4
        let bound = range_bound(&node, 2.0);
        assert!(bound >= 4.0);
        assert!(range_bound(&node, 3.0) >= bound);
    }

    #[test]
    fn range_bound_soundness_random() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for inst in builtin_library() {
            let a = inst.a;
            let bound = range_bound(&inst.node, a);
            for _ in 0..2000 {
                let x: Vec<f64> = (0..inst.ambient_dim())
                    .map(|_| rng.gen_range(-a..=a))
                    .collect();
                // check every submodel, not just the root
                check_node(&inst.node, &x, a);
                let v = inst.eval(&x).unwrap();
                assert!(v.abs() <= bound + 1e-12);
            }
        }
    }

    fn check_node(node: &HcmNode, x: &[f64], a: f64) {
        let int = node_interval(node, a);
        let v = eval_hcm(node, x).unwrap();
        assert!(
            int.lo - 1e-12 <= v && v <= int.hi + 1e-12,
            "value {v} outside {int:?}"
        );
        if let HcmNode::Composite { children, .. } = node {
            for c in children {
                check_node(c, x, a);
            }
        }
    }

    #[test]
    fn builtins_are_well_formed() {
        let lib = builtin_library();
        assert!(!lib.is_empty());
        for inst in &lib {
            assert!(inst.node.max_leaf_coord() <= inst.ambient_dim());
            let lay = layout(&inst.node);
            assert_eq!(*lay.counts.last().unwrap(), 1);
            let pairs = inst.node.smoothness_pairs();
            assert!(!pairs.is_empty());
            inst.node.visit_composites(&mut |g, _| {
                assert!(spot_check_lipschitz(g, inst.a + 2.0, 500, 99), "{}", g.name);
            });
        }
        assert!(find_builtin("no-such-model").is_err());
        // the curse-of-dimensionality fixture really is high ambient
        let high = find_builtin("high-ambient").unwrap();
        assert!(high.ambient_dim() >= 20);
    }

    #[test]
    fn builtin_closed_forms() {
        let x = [0.3, -0.7, 0.2, 0.9];
        let prod = find_builtin("product-2d").unwrap();
        let expect = 0.5 + 0.4 * (1.5 * 0.3f64).sin() * (1.5 * -0.7f64).cos();
        assert!((prod.eval(&x).unwrap() - expect).abs() < 1e-12);

        let lvl2 = find_builtin("level-2").unwrap();
        let u: f64 = (0.3 + -0.7) / 2.0;
        let v: f64 = (0.2 - 0.9) / 2.0;
        let expect = 0.5 + 0.4 * u.sin() * v.cos();
        assert!((lvl2.eval(&x).unwrap() - expect).abs() < 1e-12);
    }
}
