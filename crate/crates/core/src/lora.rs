//! Low-rank adapters on attention projections.
//!
//! An adapter adds `scale · B · A` to a frozen weight `W` (`d_out × d_in`),
//! with `A: rank × d_in` drawn from a seeded Gaussian and `B: d_out × rank`
//! starting at zero, so a fresh adapter leaves the model untouched.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Block counts of the full-scale backbone the reference placements address.
pub const FULL_SCALE_DOUBLE_BLOCKS: usize = 19;
pub const FULL_SCALE_SINGLE_BLOCKS: usize = 38;
pub const DEFAULT_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rank: usize, scale: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "rank {rank} invalid for a {d_out}x{d_in} projection"
            )));
        }
        Ok(Self {
            a: Tensor::randn(&[rank, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[d_out, rank]),
            rank,
            scale,
        })
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    fn check(&self, base: &Tensor) -> Result<()> {
        let ok = self.a.shape() == [self.rank, base.shape()[1]] && self.b.shape() == [base.shape()[0], self.rank];
        if base.ndim() != 2 || !ok {
            return Err(Error::Config(format!(
                "adapter A{:?} B{:?} does not fit weight {:?}",
                self.a.shape(),
                self.b.shape(),
                base.shape()
            )));
        }
        Ok(())
    }
}

/// `y = W·x + scale·B·(A·x)` for each row `x` of `x: [n, d_in]`.
pub fn apply(base_weight: &Tensor, adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    adapter.check(base_weight)?;
    if x.ndim() != 2 || x.shape()[1] != base_weight.shape()[1] {
        return Err(Error::Config(format!(
            "input {:?} does not fit weight {:?}",
            x.shape(),
            base_weight.shape()
        )));
    }
    let base = x.matmul(&base_weight.transpose())?;
    let low = x.matmul(&adapter.a.transpose())?.matmul(&adapter.b.transpose())?;
    base.zip_map(&low, |y, d| y + adapter.scale * d)
}

/// `W' = W + scale·B·A`.
pub fn merge(base_weight: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    adapter.check(base_weight)?;
    let delta = adapter.b.matmul(&adapter.a)?;
    base_weight.zip_map(&delta, |w, d| w + adapter.scale * d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Double,
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Qkv,
    Proj,
}

/// Where an adapter sits: a block within one stream, and which projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LoraPlacement {
    pub stream: StreamKind,
    pub block: usize,
    pub projection: Projection,
}

impl fmt::Display for LoraPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.stream {
            StreamKind::Double => "double",
            StreamKind::Single => "single",
        };
        let p = match self.projection {
            Projection::Qkv => "qkv",
            Projection::Proj => "proj",
        };
        write!(f, "{s}.{}.{p}", self.block)
    }
}

impl LoraPlacement {
    /// Index across both partitions: double blocks first, then single blocks.
    pub fn global_index(&self, double_blocks: usize) -> usize {
        match self.stream {
            StreamKind::Double => self.block,
            StreamKind::Single => double_blocks + self.block,
        }
    }
}

fn both_projections(stream: StreamKind, blocks: impl IntoIterator<Item = usize>) -> Vec<LoraPlacement> {
    blocks
        .into_iter()
        .flat_map(|block| {
            [Projection::Qkv, Projection::Proj].map(|projection| LoraPlacement {
                stream,
                block,
                projection,
            })
        })
        .collect()
}

/// The reference placements on the full-scale backbone: double-stream blocks
/// 17 and 18, single-stream blocks 34 through 37, each on `qkv` and `proj`.
pub fn reference_placements() -> Vec<LoraPlacement> {
    let mut out = both_projections(StreamKind::Double, [17, 18]);
    out.extend(both_projections(StreamKind::Single, 34..=37));
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementRule {
    /// Reference indices as-is; the model must be full-scale.
    Reference,
    /// The last `k` blocks of each stream, `k` taken from the reference
    /// placements but capped at half the stream's depth.
    #[default]
    LastK,
    /// Every block of both streams.
    All,
    /// The first `k` blocks of each stream, mirroring `LastK`.
    Early,
}

pub fn placements(rule: PlacementRule, double_blocks: usize, single_blocks: usize) -> Result<Vec<LoraPlacement>> {
    let reference = reference_placements();
    let k_ref = |s: StreamKind| reference.iter().filter(|p| p.stream == s).count() / 2;
    let k = |s: StreamKind, n: usize| k_ref(s).min((n / 2).max(1)).min(n);
    match rule {
        PlacementRule::Reference => {
            let out = reference;
            for p in &out {
                let n = match p.stream {
                    StreamKind::Double => double_blocks,
                    StreamKind::Single => single_blocks,
                };
                if p.block >= n {
                    return Err(Error::Config(format!(
                        "placement {p} out of range for a {double_blocks}+{single_blocks} block model; use the last-k rule"
                    )));
                }
            }
            Ok(out)
        }
        PlacementRule::LastK => {
            let kd = k(StreamKind::Double, double_blocks);
            let ks = k(StreamKind::Single, single_blocks);
            let mut out = both_projections(StreamKind::Double, double_blocks - kd..double_blocks);
            out.extend(both_projections(StreamKind::Single, single_blocks - ks..single_blocks));
            Ok(out)
        }
        PlacementRule::Early => {
            let kd = k(StreamKind::Double, double_blocks);
            let ks = k(StreamKind::Single, single_blocks);
            let mut out = both_projections(StreamKind::Double, 0..kd);
            out.extend(both_projections(StreamKind::Single, 0..ks));
            Ok(out)
        }
        PlacementRule::All => {
            let mut out = both_projections(StreamKind::Double, 0..double_blocks);
            out.extend(both_projections(StreamKind::Single, 0..single_blocks));
            Ok(out)
        }
    }
}

/// Adapters keyed by placement; the only trainable tensors during editor
/// fine-tuning.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterSet {
    pub entries: Vec<(LoraPlacement, LoraAdapter)>,
}

/// Graph handles for one bound adapter.
#[derive(Clone, Copy, Debug)]
pub struct BoundAdapter {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

pub struct BoundAdapters {
    pub entries: Vec<(LoraPlacement, BoundAdapter)>,
}

impl BoundAdapters {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn find(&self, p: LoraPlacement) -> Option<BoundAdapter> {
        self.entries.iter().find(|(q, _)| *q == p).map(|(_, a)| *a)
    }

    /// `[A, B]` handles in entry order, matching [`AdapterSet::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().flat_map(|(_, a)| [a.a, a.b]).collect()
    }
}

impl AdapterSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Fresh adapters at every placement. `dims(p)` gives `(d_in, d_out)`.
    pub fn new<R: Rng + ?Sized>(
        placements: &[LoraPlacement],
        dims: impl Fn(LoraPlacement) -> (usize, usize),
        rank: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let entries = placements
            .iter()
            .map(|&p| {
                let (i, o) = dims(p);
                LoraAdapter::new(i, o, rank, scale, rng).map(|a| (p, a))
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, p: LoraPlacement) -> Option<&LoraAdapter> {
        self.entries.iter().find(|(q, _)| *q == p).map(|(_, a)| a)
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> BoundAdapters {
        let entries = self
            .entries
            .iter()
            .map(|(p, a)| {
                let leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (
                    *p,
                    BoundAdapter {
                        a: leaf(&a.a),
                        b: leaf(&a.b),
                        scale: a.scale,
                    },
                )
            })
            .collect();
        BoundAdapters { entries }
    }

    /// `[A, B]` per adapter in entry order.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().flat_map(|(_, a)| [a.a.clone(), a.b.clone()]).collect()
    }

    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != 2 * self.entries.len() {
            return Err(Error::Config(format!(
                "expected {} adapter tensors, got {}",
                2 * self.entries.len(),
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        for (_, a) in &mut self.entries {
            a.a = it.next().expect("length checked");
            a.b = it.next().expect("length checked");
        }
        Ok(())
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .flat_map(|(p, _)| [format!("lora.{p}.A"), format!("lora.{p}.B")])
            .collect()
    }

    pub fn write_into(&self, c: &mut Container) {
        for ((p, a), names) in self.entries.iter().zip(self.tensor_names().chunks(2)) {
            let _ = p;
            c.push(names[0].clone(), a.a.clone());
            c.push(names[1].clone(), a.b.clone());
        }
        let meta: Vec<_> = self
            .entries
            .iter()
            .map(|(p, a)| serde_json::json!({"placement": p, "rank": a.rank, "scale": a.scale}))
            .collect();
        if let serde_json::Value::Object(m) = &mut c.config {
            m.insert("lora".into(), serde_json::Value::Array(meta));
        } else {
            c.config = serde_json::json!({ "lora": meta });
        }
    }

    pub fn read_from(c: &Container) -> Result<Self> {
        let Some(meta) = c.config.get("lora").and_then(|v| v.as_array()) else {
            return Ok(Self::empty());
        };
        let mut entries = Vec::with_capacity(meta.len());
        for m in meta {
            let p: LoraPlacement = serde_json::from_value(m["placement"].clone())?;
            let rank = m["rank"].as_u64().unwrap_or(DEFAULT_RANK as u64) as usize;
            let scale = m["scale"].as_f64().unwrap_or(1.0);
            let a = c.get(&format!("lora.{p}.A"))?.clone();
            let b = c.get(&format!("lora.{p}.B"))?.clone();
            entries.push((p, LoraAdapter { a, b, rank, scale }));
        }
        Ok(Self { entries })
    }
}

/// `x·W + b` plus the low-rank path when an adapter is bound. `w` is stored
/// `[d_in, d_out]` (row-vector convention), the adapter in `d_out × d_in` form.
pub fn adapted_linear(g: &Graph, x: Var, w: Var, bias: Var, adapter: Option<BoundAdapter>) -> Result<Var> {
    let y = g.linear(x, w, Some(bias))?;
    match adapter {
        None => Ok(y),
        Some(ad) => {
            let at = g.transpose(ad.a);
            let bt = g.transpose(ad.b);
            let low = g.matmul(x, at)?;
            let low = g.matmul(low, bt)?;
            let low = g.scale(low, ad.scale);
            g.add(y, low)
        }
    }
}
