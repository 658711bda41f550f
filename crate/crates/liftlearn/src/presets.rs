//! Bundled domain presets: PDDL text, sampling bounds, and the per-domain
//! auxiliary-loss weight.

use crate::data::WalkBounds;
use crate::domain::LiftedDomain;
use crate::domain::GroundState;
use crate::pddl::{parse_domain, parse_problem, ParseError};

pub struct Preset {
    pub name: &'static str,
    pub domain_text: &'static str,
    pub train_text: &'static str,
    pub test_texts: [&'static str; 3],
    pub bounds: WalkBounds,
    pub alpha: f64,
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "blocks3",
        domain_text: include_str!("../../../domains/blocks3/domain.pddl"),
        train_text: include_str!("../../../domains/blocks3/train.pddl"),
        test_texts: [
            include_str!("../../../domains/blocks3/test10.pddl"),
            include_str!("../../../domains/blocks3/test20.pddl"),
            include_str!("../../../domains/blocks3/test40.pddl"),
        ],
        bounds: WalkBounds { train_min: 100, train_max: 1000, val_min: 50, val_max: 500 },
        alpha: 1.0,
    },
    Preset {
        name: "gripper",
        domain_text: include_str!("../../../domains/gripper/domain.pddl"),
        train_text: include_str!("../../../domains/gripper/train.pddl"),
        test_texts: [
            include_str!("../../../domains/gripper/test12.pddl"),
            include_str!("../../../domains/gripper/test22.pddl"),
            include_str!("../../../domains/gripper/test42.pddl"),
        ],
        bounds: WalkBounds { train_min: 200, train_max: 1000, val_min: 100, val_max: 500 },
        alpha: 1.0,
    },
    Preset {
        name: "visitall",
        domain_text: include_str!("../../../domains/visitall/domain.pddl"),
        train_text: include_str!("../../../domains/visitall/train.pddl"),
        test_texts: [
            include_str!("../../../domains/visitall/test36.pddl"),
            include_str!("../../../domains/visitall/test49.pddl"),
            include_str!("../../../domains/visitall/test64.pddl"),
        ],
        bounds: WalkBounds { train_min: 100, train_max: 1000, val_min: 50, val_max: 500 },
        alpha: 1.0,
    },
    Preset {
        name: "miconic",
        domain_text: include_str!("../../../domains/miconic/domain.pddl"),
        train_text: include_str!("../../../domains/miconic/train.pddl"),
        test_texts: [
            include_str!("../../../domains/miconic/test10.pddl"),
            include_str!("../../../domains/miconic/test20.pddl"),
            include_str!("../../../domains/miconic/test40.pddl"),
        ],
        bounds: WalkBounds { train_min: 100, train_max: 1000, val_min: 50, val_max: 500 },
        alpha: 1.0,
    },
    Preset {
        name: "npuzzle",
        domain_text: include_str!("../../../domains/npuzzle/domain.pddl"),
        train_text: include_str!("../../../domains/npuzzle/train.pddl"),
        test_texts: [
            include_str!("../../../domains/npuzzle/test31.pddl"),
            include_str!("../../../domains/npuzzle/test49.pddl"),
            include_str!("../../../domains/npuzzle/test71.pddl"),
        ],
        bounds: WalkBounds { train_min: 100, train_max: 1000, val_min: 50, val_max: 500 },
        alpha: 1.0,
    },
];

pub fn preset(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

impl Preset {
    pub fn parse(&self) -> Result<(LiftedDomain, crate::domain::Instance, Vec<crate::domain::Instance>), ParseError> {
        let domain = parse_domain(self.domain_text)?;
        let train = parse_problem(self.train_text, &domain)?;
        let tests = self
            .test_texts
            .iter()
            .map(|t| parse_problem(t, &domain))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((domain, train, tests))
    }
}

/// Initial states of the three test instances, mostly useful in tests.
pub fn test_inits(p: &Preset) -> Result<Vec<GroundState>, ParseError> {
    let (_, _, tests) = p.parse()?;
    Ok(tests.into_iter().map(|t| t.init).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_parse() {
        for p in PRESETS {
            let (domain, train, tests) = p.parse().unwrap_or_else(|e| {
                panic!("preset {} failed to parse: {e}", p.name);
            });
            assert!(!domain.schemas.is_empty(), "{}", p.name);
            assert!(!train.init.atoms.is_empty(), "{}", p.name);
            assert_eq!(tests.len(), 3, "{}", p.name);
            // Test instances are at least as large as the training one.
            for t in &tests {
                assert!(t.objects.len() >= train.objects.len(), "{}", p.name);
            }
        }
    }

    #[test]
    fn blocks3_and_gripper_shapes() {
        let (d, train, _) = preset("blocks3").unwrap().parse().unwrap();
        assert_eq!(d.schemas.len(), 3);
        assert_eq!(d.predicates.len(), 4);
        assert_eq!(train.objects.len(), 5);

        let (d, train, _) = preset("gripper").unwrap().parse().unwrap();
        assert_eq!(d.schemas.len(), 3);
        assert_eq!(d.predicates.len(), 8);
        assert_eq!(train.objects.len(), 10);
    }

    #[test]
    fn every_preset_supports_walks() {
        use crate::data::{random_walk_collect, Variant, WalkBounds};
        for p in PRESETS {
            let (domain, train, _) = p.parse().unwrap();
            let bounds = WalkBounds { train_min: 30, train_max: 30, val_min: 10, val_max: 10 };
            let traces = random_walk_collect(&train, &domain, Variant::NamesOnly, bounds, 1_000_000, 7)
                .unwrap_or_else(|e| panic!("walk failed for {}: {e}", p.name));
            let (tr, va) = traces.per_action_counts(domain.schemas.len());
            assert!(tr.iter().all(|&c| c == 30), "{}: {tr:?}", p.name);
            assert!(va.iter().all(|&c| c == 10), "{}: {va:?}", p.name);
        }
    }
}
