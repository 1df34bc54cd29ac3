//! Parameter layout of the stem, the shared function bank and the classifiers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::topology::Topology;
use crate::autodiff::{ParamId, ParamKind, ParamStore, RunningStats};
use crate::error::Result;
use crate::tensor::Tensor;

/// Standard deviation of the final classifier weights. Small so that an
/// untrained model predicts close to uniformly.
const CLASSIFIER_INIT_STD: f64 = 0.01;

/// Index into [`super::Cnmm::norms`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BnId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: RunningStats,
}

/// Image to `h_0`: conv 3x3 (to C/4), BN, activation, conv 1x1 (to C), BN.
#[derive(Clone, Debug, PartialEq)]
pub struct Stem {
    pub conv: ParamId,
    pub bn1: BnId,
    pub proj: ParamId,
    pub bn2: BnId,
}

/// Part of `f_i^j` shared by every target `j`: BN, activation, depthwise 3x3,
/// pointwise conv to a quarter of the channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Prefix {
    pub bn: BnId,
    pub depthwise: ParamId,
    pub pointwise: ParamId,
}

/// Target-specific tail of `f_i^j`: 2x average pools down to `r(j)`, BN,
/// activation, conv 1x1 to `C(j)`, BN.
#[derive(Clone, Debug, PartialEq)]
pub struct Suffix {
    pub pools: usize,
    pub bn1: BnId,
    pub conv: ParamId,
    pub bn2: BnId,
}

/// BN, activation, global pooling, bias-free FC to the embedding, BN, then a
/// linear layer to the class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub exit: usize,
    pub bn1: BnId,
    pub fc: ParamId,
    pub bn2: BnId,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FunctionBank {
    pub steps: usize,
    pub stem: Stem,
    /// Indexed by source step `i`, `0..T`.
    pub prefixes: Vec<Prefix>,
    /// Indexed by [`FunctionBank::pair_index`].
    pub suffixes: Vec<Suffix>,
}

impl FunctionBank {
    /// Dense index of the pair `0 <= i < j <= T`.
    pub fn pair_index(i: usize, j: usize) -> usize {
        debug_assert!(i < j);
        j * (j - 1) / 2 + i
    }

    pub fn suffix(&self, i: usize, j: usize) -> &Suffix {
        &self.suffixes[Self::pair_index(i, j)]
    }
}

pub(crate) struct Built {
    pub params: ParamStore,
    pub norms: Vec<BatchNormLayer>,
    pub bank: FunctionBank,
    pub heads: Vec<ClassifierHead>,
}

struct Builder<'r, R: Rng> {
    params: ParamStore,
    norms: Vec<BatchNormLayer>,
    rng: &'r mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| dist.sample(self.rng))
    }

    fn conv(&mut self, name: String, co: usize, ci: usize, k: usize) -> Result<ParamId> {
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        let w = self.normal(&[co, ci, k, k], std);
        self.params.add(name, ParamKind::ConvWeight, w)
    }

    fn depthwise(&mut self, name: String, c: usize, k: usize) -> Result<ParamId> {
        let std = (2.0 / (k * k) as f64).sqrt();
        let w = self.normal(&[c, 1, k, k], std);
        self.params.add(name, ParamKind::ConvWeight, w)
    }

    fn linear(&mut self, name: String, out: usize, inp: usize, std: f64) -> Result<ParamId> {
        let w = self.normal(&[out, inp], std);
        self.params.add(name, ParamKind::LinearWeight, w)
    }

    fn bn(&mut self, name: String, c: usize) -> Result<BnId> {
        let gamma = self.params.add(
            format!("{name}.gamma"),
            ParamKind::BnScale,
            Tensor::full(&[c], 1.0),
        )?;
        let beta = self.params.add(
            format!("{name}.beta"),
            ParamKind::BnShift,
            Tensor::zeros(&[c]),
        )?;
        self.norms.push(BatchNormLayer {
            name,
            gamma,
            beta,
            stats: RunningStats::new(c),
        });
        Ok(BnId(self.norms.len() - 1))
    }
}

pub(crate) fn build<R: Rng>(topo: &Topology, rng: &mut R) -> Result<Built> {
    let mut b = Builder {
        params: ParamStore::new(),
        norms: Vec::new(),
        rng,
    };
    let c0 = topo.channels[0];
    let stem = Stem {
        conv: b.conv("stem.conv".into(), c0 / 4, topo.input_channels, 3)?,
        bn1: b.bn("stem.bn1".into(), c0 / 4)?,
        proj: b.conv("stem.proj".into(), c0, c0 / 4, 1)?,
        bn2: b.bn("stem.bn2".into(), c0)?,
    };

    let steps = topo.steps;
    let mut prefixes = Vec::with_capacity(steps);
    for i in 0..steps {
        let c = topo.channels[i];
        prefixes.push(Prefix {
            bn: b.bn(format!("prefix.{i}.bn"), c)?,
            depthwise: b.depthwise(format!("prefix.{i}.depthwise"), c, 3)?,
            pointwise: b.conv(format!("prefix.{i}.pointwise"), c / 4, c, 1)?,
        });
    }

    let mut suffixes = Vec::with_capacity(topo.num_functions());
    for j in 1..=steps {
        for i in 0..j {
            let q = topo.channels[i] / 4;
            debug_assert_eq!(FunctionBank::pair_index(i, j), suffixes.len());
            suffixes.push(Suffix {
                pools: topo.pool_stages(i, j),
                bn1: b.bn(format!("suffix.{i}.{j}.bn1"), q)?,
                conv: b.conv(format!("suffix.{i}.{j}.conv"), topo.channels[j], q, 1)?,
                bn2: b.bn(format!("suffix.{i}.{j}.bn2"), topo.channels[j])?,
            });
        }
    }

    let c_last = topo.channels[steps];
    let e = topo.embed_dim;
    let mut heads = Vec::with_capacity(topo.exits.len());
    for &exit in &topo.exits {
        heads.push(ClassifierHead {
            exit,
            bn1: b.bn(format!("head.{exit}.bn1"), c_last)?,
            fc: b.linear(
                format!("head.{exit}.fc"),
                e,
                c_last,
                (2.0 / c_last as f64).sqrt(),
            )?,
            bn2: b.bn(format!("head.{exit}.bn2"), e)?,
            out_weight: b.linear(
                format!("head.{exit}.out.weight"),
                topo.num_classes,
                e,
                CLASSIFIER_INIT_STD,
            )?,
            out_bias: b.params.add(
                format!("head.{exit}.out.bias"),
                ParamKind::LinearBias,
                Tensor::zeros(&[topo.num_classes]),
            )?,
        });
    }

    Ok(Built {
        params: b.params,
        norms: b.norms,
        bank: FunctionBank {
            steps,
            stem,
            prefixes,
            suffixes,
        },
        heads,
    })
}
