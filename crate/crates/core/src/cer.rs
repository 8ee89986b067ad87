//! Category early rejection: per-image pruning of the category axis between
//! decoder layers, driven by the auxiliary heads.
//!
//! Each pixel votes for its `k` highest-scoring categories; the union of
//! votes survives to the next layer. Indices are tracked back to the
//! original vocabulary so the final logits can be scattered to full width.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, no_grad, shape_str, Real, Tensor};

/// Per-pixel top-k width; `All` keeps every category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "KRepr", into = "KRepr")]
pub enum TopK {
    All,
    K(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum KRepr {
    Num(usize),
    Word(String),
}

impl TryFrom<KRepr> for TopK {
    type Error = String;

    fn try_from(r: KRepr) -> Result<Self, String> {
        match r {
            KRepr::Num(k) => TopK::K(k).checked().map_err(|e| e.to_string()),
            KRepr::Word(w) => w.parse().map_err(|e: Error| e.to_string()),
        }
    }
}

impl From<TopK> for KRepr {
    fn from(k: TopK) -> Self {
        match k {
            TopK::All => KRepr::Word("all".into()),
            TopK::K(k) => KRepr::Num(k),
        }
    }
}

impl TopK {
    fn checked(self) -> Result<Self> {
        match self {
            TopK::K(0) => Err(Error::InvalidArgument("top-k must be at least 1".into())),
            k => Ok(k),
        }
    }

    /// Concrete width for `n` categories; errors when `k > n`.
    pub fn resolve(self, n: usize) -> Result<usize> {
        match self {
            TopK::All => Ok(n),
            TopK::K(k) if (1..=n).contains(&k) => Ok(k),
            TopK::K(k) => Err(Error::InvalidArgument(format!("top-k {k} out of range 1..={n}"))),
        }
    }
}

impl FromStr for TopK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TopK::All);
        }
        s.parse::<usize>().map_err(|_| Error::InvalidArgument(format!("expected a positive integer or `all`, got `{s}`"))).and_then(|k| TopK::K(k).checked())
    }
}

impl fmt::Display for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopK::All => f.write_str("all"),
            TopK::K(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CerConfig {
    pub enabled: bool,
    pub k: TopK,
}

impl Default for CerConfig {
    fn default() -> Self {
        Self { enabled: true, k: TopK::K(8) }
    }
}

impl CerConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, k: TopK::All }
    }

    /// `None` when pruning is off.
    pub fn top_k(&self) -> Option<TopK> {
        self.enabled.then_some(self.k)
    }
}

/// Surviving categories of one image, as strictly increasing original
/// indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CerState {
    num_categories: usize,
    active: Vec<usize>,
    /// Local indices selected at each pruning step.
    pub per_layer_selected: Vec<Vec<usize>>,
    /// Active count entering each decoder layer.
    pub per_layer_active: Vec<usize>,
    /// Set when a selection came back empty and the fallback kicked in.
    pub fallback_used: bool,
}

impl CerState {
    pub fn new(num_categories: usize) -> Self {
        Self { num_categories, active: (0..num_categories).collect(), per_layer_selected: Vec::new(), per_layer_active: Vec::new(), fallback_used: false }
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    /// Original index of each active position.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn is_full(&self) -> bool {
        self.active.len() == self.num_categories
    }

    /// Restricts the active set to the local positions `selected`.
    pub fn compose(&mut self, selected: &[usize]) -> Result<()> {
        check_selection(selected, self.active.len())?;
        self.active = selected.iter().map(|&i| self.active[i]).collect();
        self.per_layer_selected.push(selected.to_vec());
        Ok(())
    }
}

fn check_selection(selected: &[usize], n: usize) -> Result<()> {
    if selected.windows(2).any(|w| w[0] >= w[1]) || selected.last().is_some_and(|&i| i >= n) {
        return Err(Error::InvalidArgument(format!("selection {selected:?} is not a strictly increasing subset of 0..{n}")));
    }
    Ok(())
}

/// Descending by value, ascending by index on ties. NaN ranks last.
fn ranks_before<T: Real>(a: (usize, T), b: (usize, T)) -> std::cmp::Ordering {
    let key = |v: T| if v.is_nan() { f64::NEG_INFINITY } else { v.as_f64() };
    key(b.1).total_cmp(&key(a.1)).then(a.0.cmp(&b.0))
}

/// Union over pixels of each pixel's `k` largest logits, as sorted local
/// indices. `logits` is `[H, W, N]`.
pub fn select_topk_union<T: Real>(logits: &Tensor<T>, k: usize) -> Result<Vec<usize>> {
    let [_, _, n] = *logits.shape() else {
        return Err(Error::shape("select_topk_union", "logits [H, W, N]", shape_str(logits.shape())));
    };
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("top-k {k} out of range 1..={n}")));
    }
    if k == n {
        return Ok((0..n).collect());
    }
    let mut keep = vec![false; n];
    let mut order: Vec<(usize, T)> = Vec::with_capacity(n);
    for row in logits.data().chunks_exact(n) {
        order.clear();
        order.extend(row.iter().copied().enumerate());
        order.select_nth_unstable_by(k - 1, |a, b| ranks_before(*a, *b));
        for &(i, _) in &order[..k] {
            keep[i] = true;
        }
    }
    Ok(keep.iter().enumerate().filter_map(|(i, &s)| s.then_some(i)).collect())
}

/// Position of the largest logit over all pixels and categories.
fn global_argmax<T: Real>(logits: &Tensor<T>) -> usize {
    let n = *logits.shape().last().unwrap_or(&1);
    logits.data().iter().enumerate().map(|(i, v)| (i % n, *v)).min_by(|a, b| ranks_before(*a, *b)).map_or(0, |(i, _)| i)
}

/// Keeps categories `selected` (local, increasing) of the decoder feature
/// `[H, W, N, D]` and the cost map `[Hv, Wv, N, P]`, and records the
/// selection in `cer`. An empty selection keeps the single category holding
/// the global maximum of `logits`.
pub fn prune<T: Real>(x: &Tensor<T>, cv: &Tensor<T>, selected: &[usize], logits: &Tensor<T>, cer: &mut CerState) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = cer.active.len();
    if x.rank() != 4 || x.shape()[2] != n || cv.rank() != 4 || cv.shape()[2] != n {
        return Err(Error::shape(
            "prune",
            format!("features and cost map with {n} categories on axis 2"),
            format!("{} and {}", shape_str(x.shape()), shape_str(cv.shape())),
        ));
    }
    let fallback;
    let selected = if selected.is_empty() {
        cer.fallback_used = true;
        fallback = [global_argmax(logits)];
        &fallback[..]
    } else {
        selected
    };
    cer.compose(selected)?;
    if selected.len() == n {
        return Ok((x.clone(), cv.clone()));
    }
    Ok((tensor::index_select(x, 2, selected)?, tensor::index_select(cv, 2, selected)?))
}

/// Expands `[H, W, |active|]` logits to `[H, W, N]`. Rejected categories get
/// the most negative finite value so they never win an argmax.
pub fn scatter_back<T: Real>(logits: &Tensor<T>, cer: &CerState) -> Result<Tensor<T>> {
    let [h, w, nf] = *logits.shape() else {
        return Err(Error::shape("scatter_back", "logits [H, W, N]", shape_str(logits.shape())));
    };
    if nf != cer.active.len() {
        return Err(Error::mismatch("active categories for scatter_back", cer.active.len(), nf));
    }
    if cer.is_full() {
        return Ok(logits.clone());
    }
    let n = cer.num_categories;
    let mut out = vec![T::min_value(); h * w * n];
    for (src, dst) in logits.data().chunks_exact(nf).zip(out.chunks_exact_mut(n)) {
        for (v, &i) in src.iter().zip(&cer.active) {
            dst[i] = *v;
        }
    }
    no_grad(|| Tensor::new(&[h, w, n], out))
}
