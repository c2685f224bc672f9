//! Finite-difference checks of the four trained architectures on random
//! data, as run by `fpcgan gradcheck`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{build_cnn, build_mlp};
use crate::error::{Error, Result};
use crate::gan::{build_critic, build_generator, GanTrainingConfig};
use crate::nn::gradcheck::{gradient_check, mse_loss, standard_normal, GradCheckConfig, GradCheckReport};
use crate::nn::Fault;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    GanGen,
    GanCritic,
    Mlp,
    Cnn,
}

impl ArchKind {
    pub const ALL: [ArchKind; 4] = [ArchKind::GanGen, ArchKind::GanCritic, ArchKind::Mlp, ArchKind::Cnn];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::GanGen => "gan-gen",
            ArchKind::GanCritic => "gan-critic",
            ArchKind::Mlp => "mlp",
            ArchKind::Cnn => "cnn",
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchKind::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture {s:?}")))
    }
}

/// Full-size network, random batch and random regression target.
pub fn check_architecture(kind: ArchKind, seed: u64, fault: Fault) -> Result<GradCheckReport> {
    let cfg = GanTrainingConfig::default();
    let init = seed::tagged_seed(seed, "init");
    let data = seed::tagged_seed(seed, "batch");
    let target = seed::tagged_seed(seed, "target");
    let check = GradCheckConfig {
        seed: seed::tagged_seed(seed, "probes"),
        ..GradCheckConfig::default()
    };
    match kind {
        ArchKind::GanGen => {
            let mut net = build_generator(&cfg, init)?;
            let loss = mse_loss(standard_normal(16, net.out_dim(), target));
            let x = standard_normal(16, net.in_dim(), data);
            gradient_check(&mut net, &x, &loss, &check, fault)
        }
        ArchKind::GanCritic => {
            let mut net = build_critic(&cfg, init)?;
            let loss = mse_loss(standard_normal(8, 1, target));
            let x = standard_normal(8, net.in_dim(), data);
            gradient_check(&mut net, &x, &loss, &check, fault)
        }
        ArchKind::Mlp => {
            let mut net = build_mlp(init)?;
            let loss = mse_loss(standard_normal(8, net.out_dim(), target));
            let x = standard_normal(8, net.in_dim(), data);
            gradient_check(&mut net, &x, &loss, &check, fault)
        }
        ArchKind::Cnn => {
            let mut net = build_cnn(init)?;
            let side = net.stage.input_side;
            let loss = mse_loss(standard_normal(2, net.head.out_dim(), target));
            let x = standard_normal(2, side * side, data);
            gradient_check(&mut net, &x, &loss, &check, fault)
        }
    }
}
