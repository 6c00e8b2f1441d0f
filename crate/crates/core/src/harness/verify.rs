//! Invariant checks on a stored checkpoint.

use crate::error::{Error, Result};
use crate::model::Stage;
use crate::pruning::{prune_count, Coverage};

use super::checkpoint::Checkpoint;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub stage: Stage,
    /// Fraction of prunable weights that are exactly zero.
    pub sparsity: f64,
    pub checks: Vec<Check>,
}

impl Verification {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// `Ok` when every check passed, otherwise an alignment error naming the failures.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let failed: Vec<&str> = self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        Err(Error::Alignment(format!(
            "checkpoint invariants failed: {}",
            failed.join(", ")
        )))
    }
}

pub fn verify_checkpoint(ck: &Checkpoint) -> Verification {
    let mut checks = Vec::new();
    let mut check = |name, passed, detail: String| checks.push(Check { name, passed, detail });

    check(
        "finite",
        ck.initial.is_finite() && ck.current.is_finite(),
        "all parameters finite".into(),
    );
    check(
        "initial-stage",
        ck.initial.stage == Stage::Initial,
        format!("rewind target is {}", ck.initial.stage),
    );
    if ck.stage() == Stage::Initial {
        check(
            "untrained",
            ck.current.bits_eq(&ck.initial),
            "current equals initial".into(),
        );
    }

    let needs_mask = matches!(ck.stage(), Stage::Pruned | Stage::Retrained);
    match &ck.mask {
        None => check(
            "mask-present",
            !needs_mask,
            format!("{} checkpoint without mask", ck.stage()),
        ),
        Some(mask) => {
            let aligned = mask.check_aligned(&ck.current);
            check(
                "mask-aligned",
                aligned.is_ok(),
                aligned
                    .err()
                    .map_or_else(|| "mask matches parameters".into(), |e| e.to_string()),
            );
            let n = mask.prunable_len();
            let want = prune_count(mask.percent(), n);
            check(
                "exact-count",
                mask.prunable_zeros() == want,
                format!("{} of {n} pruned, expected {want}", mask.prunable_zeros()),
            );
            let exempt_open = mask
                .layers()
                .iter()
                .filter(|l| l.coverage == Coverage::Exempt)
                .all(|l| l.bits().iter().all(|&b| b != mask.is_complement()));
            check("exempt-open", exempt_open, "classifier and biases unpruned".into());

            if needs_mask && !mask.is_complement() && mask.check_aligned(&ck.current).is_ok() {
                let mut pruned_zero = true;
                let mut survivors_rewound = true;
                for ((cur, init), l) in ck.current.entries().iter().zip(ck.initial.entries()).zip(mask.layers()) {
                    for ((&c, &i), &open) in cur.tensor.values().iter().zip(init.tensor.values()).zip(l.bits()) {
                        if !open && c.to_bits() != 0 {
                            pruned_zero = false;
                        }
                        if open && c.to_bits() != i.to_bits() {
                            survivors_rewound = false;
                        }
                    }
                }
                check("pruned-zero", pruned_zero, "pruned coordinates are exactly 0".into());
                if ck.stage() == Stage::Pruned {
                    check(
                        "rewound",
                        survivors_rewound,
                        "survivors equal their initial values".into(),
                    );
                }
            }
        }
    }
    Verification {
        stage: ck.stage(),
        sparsity: ck.current.prunable_sparsity(),
        checks,
    }
}
