//! Projection heads mapping a pooled representation to prototype logits.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::encoder::{linear, INIT_STD};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamSet};
use crate::tensor::Tensor;

use super::RepKey;

/// Sizes shared by every head of a bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    /// Output size of image/region heads.
    pub k_region: usize,
    /// Output size of disentangled heads.
    pub k_dis: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 128,
            bottleneck: 32,
            k_region: 256,
            k_dis: 64,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.bottleneck == 0 {
            return Err(Error::Config("head hidden/bottleneck sizes must be positive".into()));
        }
        if self.k_region < 2 || self.k_dis < 2 {
            return Err(Error::Config("head output sizes must exceed 1".into()));
        }
        Ok(())
    }

    pub fn out_dim(&self, key: RepKey) -> usize {
        if key.is_disentangled() {
            self.k_dis
        } else {
            self.k_region
        }
    }
}

/// `x → GELU(fc1) → GELU(fc2) → fc3 → l2-normalize → weight-normalized last`.
/// The last layer has unit column norms and no bias.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
    pub fc3: (ParamId, ParamId),
    pub last: ParamId,
    pub out_dim: usize,
}

const PARTS: [&str; 7] = ["fc1.w", "fc1.b", "fc2.w", "fc2.b", "fc3.w", "fc3.b", "last.v"];

impl ProjectionHead {
    pub fn init(
        set: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        cfg: &HeadConfig,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let dims = [
            (in_dim, cfg.hidden),
            (cfg.hidden, cfg.hidden),
            (cfg.hidden, cfg.bottleneck),
        ];
        let mut ids = Vec::with_capacity(7);
        for (i, (a, b)) in dims.iter().enumerate() {
            ids.push(set.add(
                format!("{prefix}.{}", PARTS[2 * i]),
                Tensor::trunc_normal(&[*a, *b], INIT_STD, rng),
            ));
            ids.push(set.add(format!("{prefix}.{}", PARTS[2 * i + 1]), Tensor::zeros(&[*b])));
        }
        let last = set.add(
            format!("{prefix}.last.v"),
            Tensor::trunc_normal(&[cfg.bottleneck, out_dim], INIT_STD, rng),
        );
        ProjectionHead {
            fc1: (ids[0], ids[1]),
            fc2: (ids[2], ids[3]),
            fc3: (ids[4], ids[5]),
            last,
            out_dim,
        }
    }

    pub fn locate(set: &ParamSet, prefix: &str) -> Result<Self> {
        let ids = PARTS
            .iter()
            .map(|p| {
                let name = format!("{prefix}.{p}");
                set.find(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let out_dim = set.get(ids[6]).cols();
        Ok(ProjectionHead {
            fc1: (ids[0], ids[1]),
            fc2: (ids[2], ids[3]),
            fc3: (ids[4], ids[5]),
            last: ids[6],
            out_dim,
        })
    }

    /// Logits `[1 × K]` for a pooled `[1 × d]` representation.
    pub fn forward_on(&self, tape: &mut Tape, b: &mut Binder, x: Var) -> Result<Var> {
        let h = linear(tape, b, x, self.fc1.0, self.fc1.1)?;
        let h = tape.gelu(h);
        let h = linear(tape, b, h, self.fc2.0, self.fc2.1)?;
        let h = tape.gelu(h);
        let z = linear(tape, b, h, self.fc3.0, self.fc3.1)?;
        let z = tape.l2_normalize_rows(z);
        let v = b.var(tape, self.last);
        let vt = tape.transpose(v);
        let wn = tape.l2_normalize_rows(vt);
        tape.matmul_bt(z, wn)
    }

    /// Inference-only forward.
    pub fn apply(&self, set: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Binder::frozen(set);
        let xv = tape.constant(x.clone().reshape(&[1, x.len()])?);
        let out = self.forward_on(&mut tape, &mut b, xv)?;
        Ok(tape.value(out).clone())
    }
}

/// One head per representation key used by a variant.
#[derive(Debug, Clone)]
pub struct HeadBank {
    pub heads: Vec<(RepKey, ProjectionHead)>,
}

impl HeadBank {
    pub fn prefix(key: RepKey) -> String {
        format!("heads.{}", key.name())
    }

    pub fn init(
        set: &mut ParamSet,
        keys: &[RepKey],
        in_dim: usize,
        cfg: &HeadConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let heads = keys
            .iter()
            .map(|&k| {
                let h = ProjectionHead::init(set, &Self::prefix(k), in_dim, cfg, cfg.out_dim(k), rng);
                (k, h)
            })
            .collect();
        Ok(HeadBank { heads })
    }

    pub fn locate(set: &ParamSet, keys: &[RepKey]) -> Result<Self> {
        let heads = keys
            .iter()
            .map(|&k| Ok((k, ProjectionHead::locate(set, &Self::prefix(k))?)))
            .collect::<Result<_>>()?;
        Ok(HeadBank { heads })
    }

    pub fn get(&self, key: RepKey) -> Option<&ProjectionHead> {
        self.heads.iter().find(|(k, _)| *k == key).map(|(_, h)| h)
    }

    pub fn keys(&self) -> Vec<RepKey> {
        self.heads.iter().map(|(k, _)| *k).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn last_layer_is_weight_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut set = ParamSet::new();
        let cfg = HeadConfig {
            hidden: 6,
            bottleneck: 4,
            k_region: 5,
            k_dis: 3,
        };
        let head = ProjectionHead::init(&mut set, "h", 3, &cfg, 5, &mut rng);
        // Scaling a column of V leaves the logits unchanged.
        let x = Tensor::vector(vec![0.3, -1.0, 2.0]);
        let before = head.apply(&set, &x).unwrap();
        let v = set.get_mut(head.last);
        for r in 0..4 {
            v.data_mut()[r * 5 + 2] *= 7.0;
        }
        let after = head.apply(&set, &x).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Logits are cosines, so bounded by 1.
        assert!(before.data().iter().all(|z| z.abs() <= 1.0 + 1e-12));
        assert_eq!(before.shape(), &[1, 5]);
    }

    #[test]
    fn bank_round_trips_through_locate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut set = ParamSet::new();
        let keys = [RepKey::Cell, RepKey::SelfBack];
        let bank = HeadBank::init(&mut set, &keys, 4, &HeadConfig::default(), &mut rng).unwrap();
        let found = HeadBank::locate(&set, &keys).unwrap();
        assert_eq!(found.get(RepKey::SelfBack).unwrap().out_dim, 64);
        assert_eq!(found.get(RepKey::Cell).unwrap().last, bank.get(RepKey::Cell).unwrap().last);
        assert!(found.get(RepKey::Image).is_none());
    }
}
