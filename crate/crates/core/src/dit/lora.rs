//! Low-rank adapters over frozen weights.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{DenseArray, Graph, ParamStore, Real, Rng, Var};

/// Pairs `(A: n×d, B: m×d)` per target weight `W: n×m`, applied as
/// `W + (alpha / d) · A·Bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
    pub params: ParamStore<T>,
}

impl<T: Real> LoraAdapter<T> {
    pub fn a_name(target: &str) -> String {
        format!("{target}.lora_a")
    }

    pub fn b_name(target: &str) -> String {
        format!("{target}.lora_b")
    }

    /// Fresh adapter: `A` Gaussian with variance `1/n`, `B = 0`, so the
    /// adapted weights start equal to the base.
    pub fn init(
        base: &ParamStore<T>,
        targets: &[String],
        rank: usize,
        alpha: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config {
                key: "model.lora_rank".into(),
                detail: "rank must be positive".into(),
            });
        }
        let mut params = ParamStore::new();
        for t in targets {
            let w = base.require(t)?;
            let (n, m) = w.matrix_dims("lora")?;
            params.insert(
                Self::a_name(t),
                rng.normal_array(&[n, rank], 1.0 / (n as f64).sqrt()),
                false,
            )?;
            params.insert(Self::b_name(t), DenseArray::zeros(&[m, rank]), false)?;
        }
        Ok(Self {
            rank,
            alpha,
            targets: targets.to_vec(),
            params,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn targets(&self, name: &str) -> bool {
        self.targets.iter().any(|t| t == name)
    }

    fn factors(&self, target: &str) -> Result<(&DenseArray<T>, &DenseArray<T>)> {
        Ok((
            self.params.require(&Self::a_name(target))?,
            self.params.require(&Self::b_name(target))?,
        ))
    }
}

fn check_dims<T: Real>(w: &DenseArray<T>, a: &DenseArray<T>, b: &DenseArray<T>, rank: usize, name: &str) -> Result<()> {
    let (n, m) = w.matrix_dims("lora")?;
    if a.shape() != [n, rank] || b.shape() != [m, rank] {
        return Err(shape_err(
            "apply_lora",
            format!(
                "`{name}` is {n}x{m} but A is {:?} and B is {:?} at rank {rank}",
                a.shape(),
                b.shape()
            ),
        ));
    }
    Ok(())
}

/// Materializes `W' = W + scale · A·Bᵀ` for every target. The base store is
/// left untouched.
pub fn apply_lora<T: Real>(params: &ParamStore<T>, adapter: &LoraAdapter<T>) -> Result<ParamStore<T>> {
    let mut out = params.clone();
    let s = T::from_f64(adapter.scale());
    for t in &adapter.targets {
        let w = params.require(t)?;
        let (a, b) = adapter.factors(t)?;
        check_dims(w, a, b, adapter.rank, t)?;
        let delta = a.matmul(&b.transpose()?)?.scale(s);
        out.set(t, w.add(&delta)?)?;
    }
    Ok(out)
}

/// Read-only view of base weights with an optional adapter, resolving each
/// name to one tape node per graph.
pub struct WeightView<'a, T> {
    params: &'a ParamStore<T>,
    adapter: Option<&'a LoraAdapter<T>>,
    cache: HashMap<String, Var>,
}

impl<'a, T: Real> WeightView<'a, T> {
    pub fn new(params: &'a ParamStore<T>, adapter: Option<&'a LoraAdapter<T>>) -> Self {
        Self {
            params,
            adapter,
            cache: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
    }

    pub fn adapter(&self) -> Option<&'a LoraAdapter<T>> {
        self.adapter
    }

    pub fn get(&mut self, graph: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.cache.get(name) {
            return Ok(v);
        }
        let w = graph.param(self.params, name)?;
        let v = match self.adapter.filter(|a| a.targets(name)) {
            None => w,
            Some(ad) => {
                let (a, b) = ad.factors(name)?;
                check_dims(self.params.require(name)?, a, b, ad.rank, name)?;
                let av = graph.param(&ad.params, &LoraAdapter::<T>::a_name(name))?;
                let bv = graph.param(&ad.params, &LoraAdapter::<T>::b_name(name))?;
                let ab = graph.matmul_bt(av, bv)?;
                let delta = graph.scale(ab, T::from_f64(ad.scale()));
                graph.add(w, delta)?
            }
        };
        self.cache.insert(name.to_string(), v);
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", DenseArray::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]), true).unwrap();
        let mut ad = LoraAdapter::init(&p, &["w".to_string()], 1, 1.0, &mut Rng::new(0)).unwrap();
        ad.params.set("w.lora_a", DenseArray::from_rows(&[&[1.0], &[0.0]])).unwrap();
        ad.params.set("w.lora_b", DenseArray::from_rows(&[&[0.0], &[1.0]])).unwrap();
        let merged = apply_lora(&p, &ad).unwrap();
        assert_eq!(merged.get("w").unwrap(), &DenseArray::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]]));
        assert_eq!(p.get("w").unwrap(), &DenseArray::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    }

    #[test]
    fn fresh_adapter_is_identity_and_alpha_equal_rank_is_unit_scale() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Rng::new(3).normal_array(&[4, 3], 1.0), true).unwrap();
        let ad = LoraAdapter::init(&p, &["w".to_string()], 2, 2.0, &mut Rng::new(0)).unwrap();
        assert_eq!(ad.scale(), 1.0);
        assert_eq!(apply_lora(&p, &ad).unwrap(), p);
    }

    #[test]
    fn dim_mismatch_is_reported() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", DenseArray::zeros(&[2, 2]), true).unwrap();
        let mut ad = LoraAdapter::init(&p, &["w".to_string()], 1, 1.0, &mut Rng::new(0)).unwrap();
        p.set("w", DenseArray::zeros(&[2, 2])).unwrap();
        ad.params = ParamStore::new();
        ad.params.insert("w.lora_a", DenseArray::zeros(&[3, 1]), false).unwrap();
        ad.params.insert("w.lora_b", DenseArray::zeros(&[2, 1]), false).unwrap();
        assert!(matches!(apply_lora(&p, &ad), Err(Error::Shape { .. })));
    }
}
