//! Layered, filter-addressable parameter containers.
//!
//! A model is a list of layers, each layer a list of filters, each filter a
//! contiguous run of `f64` scalars. Fully connected weight layers store one
//! output row per filter; bias layers store the whole bias vector as a single
//! filter.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSlice(Vec<f64>);

impl FilterSlice {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "non-finite value {} at position {pos}",
                values[pos]
            )));
        }
        Ok(FilterSlice(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    kind: LayerKind,
    filters: Vec<FilterSlice>,
}

impl Layer {
    pub fn new(kind: LayerKind, filters: Vec<FilterSlice>) -> Result<Self> {
        if filters.is_empty() {
            return Err(Error::InvalidParams("layer has no filters".into()));
        }
        if kind == LayerKind::Weight {
            let len = filters[0].len();
            if let Some(j) = filters.iter().position(|f| f.len() != len) {
                return Err(Error::InvalidParams(format!(
                    "weight filter {j} has length {} (expected {len})",
                    filters[j].len()
                )));
            }
        }
        Ok(Layer { kind, filters })
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn filters(&self) -> &[FilterSlice] {
        &self.filters
    }

    pub fn num_filters(&self) -> usize {
        self.filters.len()
    }

    pub(crate) fn filters_mut(&mut self) -> &mut [FilterSlice] {
        &mut self.filters
    }
}

/// Shape of a [`LayeredParams`]: per layer, its kind and per-filter lengths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub layers: Vec<(LayerKind, Vec<usize>)>,
}

impl Shape {
    /// A single weight layer of `filters` filters, each `len` long.
    pub fn dense(filters: usize, len: usize) -> Shape {
        Shape {
            layers: vec![(LayerKind::Weight, vec![len; filters])],
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.layers
            .iter()
            .map(|(_, f)| f.iter().sum::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayeredParams {
    layers: Vec<Layer>,
}

impl LayeredParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParams("model has no layers".into()));
        }
        let p = LayeredParams { layers };
        if p.num_scalars() == 0 {
            return Err(Error::InvalidParams("model has no scalars".into()));
        }
        Ok(p)
    }

    pub fn zeros(shape: &Shape) -> Result<Self> {
        let layers = shape
            .layers
            .iter()
            .map(|(kind, lens)| {
                Layer::new(
                    *kind,
                    lens.iter().map(|&n| FilterSlice(vec![0.0; n])).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        LayeredParams::new(layers)
    }

    /// Builds params of `shape` from a flat scalar vector in layer/filter order.
    pub fn from_flat(shape: &Shape, flat: &[f64]) -> Result<Self> {
        if flat.len() != shape.num_scalars() {
            return Err(Error::Dimension {
                expected: shape.num_scalars(),
                got: flat.len(),
            });
        }
        let mut p = LayeredParams::zeros(shape)?;
        let mut it = flat.iter();
        for v in p.scalars_mut() {
            *v = *it.next().expect("length checked");
        }
        if let Some(bad) = flat.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("non-finite value {bad}")));
        }
        Ok(p)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn shape(&self) -> Shape {
        Shape {
            layers: self
                .layers
                .iter()
                .map(|l| (l.kind, l.filters.iter().map(FilterSlice::len).collect()))
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.filters.iter())
            .map(FilterSlice::len)
            .sum()
    }

    pub fn scalars(&self) -> impl Iterator<Item = &f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.filters.iter())
            .flat_map(|f| f.0.iter())
    }

    pub(crate) fn scalars_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.filters.iter_mut())
            .flat_map(|f| f.0.iter_mut())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.scalars().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.scalars().all(|v| v.is_finite())
    }

    /// Replaces layer kinds with those of `template` (same layer count required).
    pub fn with_kinds_of(mut self, template: &LayeredParams) -> Result<Self> {
        check_same_shape_ignoring_kind(&self, template)?;
        for (l, t) in self.layers.iter_mut().zip(&template.layers) {
            l.kind = t.kind;
        }
        Ok(self)
    }

    /// Applies `f` to every pair of corresponding scalars, producing new params.
    pub fn zip_map(&self, other: &LayeredParams, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        check_same_shape(self, other)?;
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(la, lb)| Layer {
                kind: la.kind,
                filters: la
                    .filters
                    .iter()
                    .zip(&lb.filters)
                    .map(|(fa, fb)| {
                        FilterSlice(fa.0.iter().zip(&fb.0).map(|(&a, &b)| f(a, b)).collect())
                    })
                    .collect(),
            })
            .collect();
        Ok(LayeredParams { layers })
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        let mut out = self.clone();
        for v in out.scalars_mut() {
            *v = f(*v);
        }
        out
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn sq_norm(&self) -> f64 {
        compensated_sum(self.scalars().map(|v| v * v))
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn dot(&self, other: &LayeredParams) -> Result<f64> {
        check_same_shape(self, other)?;
        Ok(compensated_sum(
            self.scalars().zip(other.scalars()).map(|(a, b)| a * b),
        ))
    }
}

/// Structural copy. Kept as a named operation because the mutation step starts
/// from an explicit copy of the global model.
pub fn clone_params(p: &LayeredParams) -> LayeredParams {
    p.clone()
}

/// Element-wise `a - b`.
pub fn diff(a: &LayeredParams, b: &LayeredParams) -> Result<LayeredParams> {
    a.zip_map(b, |x, y| x - y)
}

/// Element-wise `base + coef * delta`.
pub fn add_scaled(base: &LayeredParams, coef: f64, delta: &LayeredParams) -> Result<LayeredParams> {
    if !coef.is_finite() {
        return Err(Error::InvalidParams(format!(
            "coefficient {coef} is not finite"
        )));
    }
    base.zip_map(delta, |b, d| b + coef * d)
}

/// Sum of squared element-wise differences.
pub fn sq_distance(a: &LayeredParams, b: &LayeredParams) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(compensated_sum(a.scalars().zip(b.scalars()).map(
        |(x, y)| {
            let d = x - y;
            d * d
        },
    )))
}

pub fn check_same_shape(a: &LayeredParams, b: &LayeredParams) -> Result<()> {
    check_same_shape_ignoring_kind(a, b)?;
    for (i, (la, lb)) in a.layers.iter().zip(&b.layers).enumerate() {
        if la.kind != lb.kind {
            return Err(Error::ShapeMismatch {
                layer: i,
                filter: None,
                detail: format!("layer kind {:?} vs {:?}", la.kind, lb.kind),
            });
        }
    }
    Ok(())
}

fn check_same_shape_ignoring_kind(a: &LayeredParams, b: &LayeredParams) -> Result<()> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::ShapeMismatch {
            layer: a.layers.len().min(b.layers.len()),
            filter: None,
            detail: format!("layer count {} vs {}", a.layers.len(), b.layers.len()),
        });
    }
    for (i, (la, lb)) in a.layers.iter().zip(&b.layers).enumerate() {
        if la.filters.len() != lb.filters.len() {
            return Err(Error::ShapeMismatch {
                layer: i,
                filter: None,
                detail: format!("filter count {} vs {}", la.filters.len(), lb.filters.len()),
            });
        }
        for (j, (fa, fb)) in la.filters.iter().zip(&lb.filters).enumerate() {
            if fa.len() != fb.len() {
                return Err(Error::ShapeMismatch {
                    layer: i,
                    filter: Some(j),
                    detail: format!("filter length {} vs {}", fa.len(), fb.len()),
                });
            }
        }
    }
    Ok(())
}

/// Neumaier-compensated summation.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

// JSON form: layers -> filters -> scalars. Kinds are not stored; deserialized
// layers are weights unless relabelled with `with_kinds_of`.
impl Serialize for LayeredParams {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let nested: Vec<Vec<&[f64]>> = self
            .layers
            .iter()
            .map(|l| l.filters.iter().map(|f| f.values()).collect())
            .collect();
        nested.serialize(s)
    }
}

impl<'de> Deserialize<'de> for LayeredParams {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let nested = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
        let layers = nested
            .into_iter()
            .map(|filters| {
                let filters = filters
                    .into_iter()
                    .map(FilterSlice::new)
                    .collect::<Result<Vec<_>>>()?;
                let kind = if filters.windows(2).all(|w| w[0].len() == w[1].len()) {
                    LayerKind::Weight
                } else {
                    LayerKind::Bias
                };
                Layer::new(kind, filters)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        LayeredParams::new(layers).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(layers: &[&[&[f64]]]) -> LayeredParams {
        LayeredParams::new(
            layers
                .iter()
                .map(|fs| {
                    Layer::new(
                        LayerKind::Weight,
                        fs.iter()
                            .map(|f| FilterSlice::new(f.to_vec()).unwrap())
                            .collect(),
                    )
                    .unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn clone_is_independent() {
        let a = p(&[&[&[1.0]]]);
        let mut b = clone_params(&a);
        assert_eq!(a, b);
        *b.scalars_mut().next().unwrap() = 5.0;
        assert_eq!(a.to_flat(), vec![1.0]);
    }

    #[test]
    fn empty_models_are_rejected() {
        assert!(LayeredParams::new(vec![]).is_err());
        assert!(Layer::new(LayerKind::Weight, vec![]).is_err());
        assert!(FilterSlice::new(vec![f64::NAN]).is_err());
        let ragged = vec![
            FilterSlice::new(vec![1.0]).unwrap(),
            FilterSlice::new(vec![1.0, 2.0]).unwrap(),
        ];
        assert!(Layer::new(LayerKind::Weight, ragged).is_err());
    }

    #[test]
    fn scalar_examples() {
        let d = diff(&p(&[&[&[2.0]]]), &p(&[&[&[0.5]]])).unwrap();
        assert_eq!(d.to_flat(), vec![1.5]);
        let s = add_scaled(&p(&[&[&[1.0]]]), 2.0, &p(&[&[&[0.25]]])).unwrap();
        assert_eq!(s.to_flat(), vec![1.5]);
        let z = add_scaled(&p(&[&[&[1.0, 3.0]]]), 0.0, &p(&[&[&[7.0, 8.0]]])).unwrap();
        assert_eq!(z.to_flat(), vec![1.0, 3.0]);
        assert_eq!(
            sq_distance(&p(&[&[&[3.0, 4.0]]]), &p(&[&[&[0.0, 0.0]]])).unwrap(),
            25.0
        );
    }

    #[test]
    fn shape_mismatch_names_layer_and_filter() {
        let a = p(&[&[&[1.0]], &[&[1.0, 2.0], &[3.0, 4.0]]]);
        let b = p(&[&[&[1.0]], &[&[1.0, 2.0, 0.0], &[3.0, 4.0, 0.0]]]);
        match diff(&a, &b) {
            Err(Error::ShapeMismatch {
                layer: 1,
                filter: Some(0),
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let c = p(&[&[&[1.0]]]);
        assert!(matches!(
            sq_distance(&a, &c),
            Err(Error::ShapeMismatch {
                layer: 1,
                filter: None,
                ..
            })
        ));
    }

    #[test]
    fn json_is_nested_arrays_with_exact_roundtrip() {
        let a = p(&[
            &[&[0.1, 1.0 / 3.0]],
            &[&[-2.5e-300], &[std::f64::consts::PI]],
        ]);
        let s = serde_json::to_string(&a).unwrap();
        assert!(s.starts_with("[[[0.1,0.3333333333333333]]"));
        let back: LayeredParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back.to_flat(), a.to_flat());
        assert!(serde_json::from_str::<LayeredParams>("[]").is_err());
    }

    fn arb_pair() -> impl Strategy<Value = (LayeredParams, LayeredParams)> {
        (1usize..4, 1usize..5, 1usize..6).prop_flat_map(|(l, f, n)| {
            let total = l * f * n;
            (
                prop::collection::vec(-1e3f64..1e3, total),
                prop::collection::vec(-1e3f64..1e3, total),
            )
                .prop_map(move |(a, b)| {
                    let shape = Shape {
                        layers: vec![(LayerKind::Weight, vec![n; f]); l],
                    };
                    (
                        LayeredParams::from_flat(&shape, &a).unwrap(),
                        LayeredParams::from_flat(&shape, &b).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn arithmetic_matches_flat_oracle((a, b) in arb_pair(), coef in -10.0f64..10.0) {
            let (fa, fb) = (a.to_flat(), b.to_flat());
            let d = diff(&a, &b).unwrap().to_flat();
            let s = add_scaled(&a, coef, &b).unwrap().to_flat();
            for i in 0..fa.len() {
                prop_assert_eq!(d[i], fa[i] - fb[i]);
                prop_assert_eq!(s[i], fa[i] + coef * fb[i]);
            }
            let oracle: f64 = fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum();
            let dist = sq_distance(&a, &b).unwrap();
            prop_assert!((dist - oracle).abs() <= 1e-9 * oracle.max(1.0));
            prop_assert_eq!(dist, sq_distance(&b, &a).unwrap());
            prop_assert_eq!(dist, diff(&a, &b).unwrap().sq_norm());
            prop_assert!(diff(&a, &a).unwrap().scalars().all(|&v| v == 0.0));
            let back = add_scaled(&b, 1.0, &diff(&a, &b).unwrap()).unwrap().to_flat();
            for i in 0..fa.len() {
                prop_assert!((back[i] - fa[i]).abs() <= 1e-12 * fa[i].abs().max(1.0));
            }
        }

        #[test]
        fn clone_then_perturb_leaves_original((a, _b) in arb_pair()) {
            let before = a.to_flat();
            let c = clone_params(&a).map(|v| v + 1.0);
            prop_assert_eq!(a.to_flat(), before.clone());
            prop_assert!(c.to_flat().iter().zip(&before).all(|(x, y)| *x == y + 1.0));
        }
    }
}
