use crate::error::{Error, Result};

/// Nonlinearity used inside every block. `Identity` makes every block affine,
/// which is what the exactness checks against the enumerated mixture need.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Shapes of every step of the chain.
///
/// Index 0 describes the stem output `h_0`; step `t` describes every map that
/// a block `f_i^t` writes. `resolution[0]` is also the input extent, since the
/// stem keeps the spatial size.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub steps: usize,
    pub channels: Vec<usize>,
    pub resolution: Vec<(usize, usize)>,
    pub exits: Vec<usize>,
    pub num_classes: usize,
    pub input_channels: usize,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Topology {
    /// Single-resolution chain with a classifier after every step.
    pub fn chain(
        steps: usize,
        channels: usize,
        extent: (usize, usize),
        num_classes: usize,
    ) -> Self {
        Self {
            steps,
            channels: vec![channels; steps + 1],
            resolution: vec![extent; steps + 1],
            exits: (1..=steps).collect(),
            num_classes,
            input_channels: 3,
            embed_dim: 8 * channels,
            activation: Activation::Relu,
        }
    }

    /// `blocks x scales` steps; every block halves the resolution and doubles
    /// the channels of the previous one, with a classifier at each block end.
    pub fn multiscale(
        blocks: usize,
        scales: usize,
        channels: usize,
        extent: (usize, usize),
        num_classes: usize,
    ) -> Self {
        let steps = blocks * scales;
        let mut ch = vec![channels];
        let mut res = vec![extent];
        for t in 1..=steps {
            let block = (t - 1) / scales.max(1);
            ch.push(channels << block);
            let mut r = extent;
            for _ in 0..block {
                r = (r.0.div_ceil(2), r.1.div_ceil(2));
            }
            res.push(r);
        }
        Self {
            steps,
            channels: ch,
            resolution: res,
            exits: (1..=blocks).map(|b| b * scales).collect(),
            num_classes,
            input_channels: 3,
            embed_dim: 8 * channels,
            activation: Activation::Relu,
        }
    }

    pub fn with_exits(mut self, exits: Vec<usize>) -> Self {
        self.exits = exits;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_embed_dim(mut self, embed_dim: usize) -> Self {
        self.embed_dim = embed_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Topology(msg));
        let t = self.steps;
        if t == 0 {
            return fail("at least one step required".into());
        }
        if self.channels.len() != t + 1 || self.resolution.len() != t + 1 {
            return fail(format!(
                "schedules must have T + 1 = {} entries (channels {}, resolution {})",
                t + 1,
                self.channels.len(),
                self.resolution.len()
            ));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c < 4 || c % 4 != 0) {
            return fail(format!(
                "channel count {c} must be a positive multiple of 4"
            ));
        }
        if self.resolution.iter().any(|&(h, w)| h == 0 || w == 0) {
            return fail("empty spatial extent".into());
        }
        for s in 1..=t {
            let (prev, cur) = (self.resolution[s - 1], self.resolution[s]);
            if cur != prev && cur != halve(prev) {
                return fail(format!(
                    "resolution at step {s} is {cur:?}; must equal or halve {prev:?}"
                ));
            }
        }
        if self.exits.is_empty() || self.exits.last() != Some(&t) {
            return fail("exits must be non-empty and include the final step".into());
        }
        if self.exits.windows(2).any(|w| w[0] >= w[1]) || self.exits[0] == 0 {
            return fail(format!(
                "exits {:?} must be strictly increasing in 1..=T",
                self.exits
            ));
        }
        if self.num_classes < 2 {
            return fail("need at least two classes".into());
        }
        if self.embed_dim == 0 || self.input_channels == 0 {
            return fail("embedding and input widths must be positive".into());
        }
        Ok(())
    }

    /// Number of 2x pooling stages between step `i` and step `j`.
    pub fn pool_stages(&self, i: usize, j: usize) -> usize {
        let mut r = self.resolution[i];
        let mut k = 0;
        while r != self.resolution[j] {
            r = halve(r);
            k += 1;
        }
        k
    }

    /// Elements per item of a map written at step `t`.
    pub fn map_size(&self, t: usize) -> usize {
        let (h, w) = self.resolution[t];
        self.channels[t] * h * w
    }

    pub fn input_extent(&self) -> (usize, usize) {
        self.resolution[0]
    }

    pub fn exit_index(&self, exit: usize) -> Result<usize> {
        self.exits
            .iter()
            .position(|&e| e == exit)
            .ok_or_else(|| Error::InvalidArgument(format!("step {exit} has no classifier")))
    }

    /// Number of block pairs `(i, j)`, `0 <= i < j <= T`.
    pub fn num_functions(&self) -> usize {
        self.steps * (self.steps + 1) / 2
    }
}

pub(crate) fn halve((h, w): (usize, usize)) -> (usize, usize) {
    (h.div_ceil(2), w.div_ceil(2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_is_valid() {
        let t = Topology::chain(4, 8, (8, 8), 3);
        t.validate().unwrap();
        assert_eq!(t.exits, vec![1, 2, 3, 4]);
        assert_eq!(t.num_functions(), 10);
    }

    #[test]
    fn multiscale_schedule() {
        let t = Topology::multiscale(3, 2, 8, (8, 8), 10);
        t.validate().unwrap();
        assert_eq!(t.channels, vec![8, 8, 8, 16, 16, 32, 32]);
        assert_eq!(t.resolution[6], (2, 2));
        assert_eq!(t.exits, vec![2, 4, 6]);
        assert_eq!(t.pool_stages(0, 6), 2);
        assert_eq!(t.pool_stages(3, 4), 0);
    }

    #[test]
    fn rejects_bad_topologies() {
        let base = Topology::chain(3, 8, (8, 8), 3);
        let mut t = base.clone();
        t.channels[2] = 6;
        assert!(t.validate().is_err());
        let mut t = base.clone();
        t.resolution[2] = (3, 3);
        assert!(t.validate().is_err());
        assert!(base.clone().with_exits(vec![1, 2]).validate().is_err());
        assert!(base.clone().with_exits(vec![2, 2, 3]).validate().is_err());
        let mut t = base;
        t.num_classes = 1;
        assert!(t.validate().is_err());
    }
}
