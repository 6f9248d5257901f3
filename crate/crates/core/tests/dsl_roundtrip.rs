use dym_core::dsl::{decompile, exact_match, generate_corpus, Dsl, GrammarSpec, SplitSizes};
use proptest::prelude::*;

fn programs(seed: u64, n: usize) -> Vec<dym_core::dsl::Program> {
    let sizes = SplitSizes {
        train: n - 2,
        validation: 1,
        test: 1,
    };
    generate_corpus(&GrammarSpec::calendar(), seed, sizes)
        .unwrap()
        .into_iter()
        .map(|e| e.gold)
        .collect()
}

#[test]
fn thousand_generated_programs_round_trip() {
    let dsl = Dsl::calendar();
    let ps = programs(3, 1000);
    assert_eq!(ps.len(), 1000);
    for p in &ps {
        let surface = decompile(p);
        let back = dsl.compile(&surface).unwrap();
        assert_eq!(&back, p);
        assert_eq!(decompile(&back), surface);
        assert_eq!(dsl.program_from_tokens(p.tokens()).unwrap(), *p);
        assert!(!p.tokens().iter().any(|t| t == "(" || t == ")"));
    }
}

#[test]
fn exact_match_agrees_with_surface_equality() {
    let ps = programs(5, 300);
    for a in ps.iter().take(60) {
        for b in &ps {
            assert_eq!(exact_match(a, b), decompile(a) == decompile(b));
        }
    }
}

#[test]
fn function_arities_hold_in_generated_trees() {
    let dsl = Dsl::calendar();
    fn walk(dsl: &Dsl, n: &dym_core::dsl::Node) {
        if let dym_core::dsl::Node::Call { function, args } = n {
            assert_eq!(dsl.arity(function), Some(args.len()), "{function}");
            for a in args {
                walk(dsl, a);
            }
        }
    }
    for p in programs(9, 500) {
        walk(&dsl, p.tree());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_trip_holds_for_any_seed(seed in any::<u64>()) {
        let dsl = Dsl::calendar();
        for p in programs(seed, 50) {
            let s = decompile(&p);
            prop_assert_eq!(decompile(&dsl.compile(&s).unwrap()), s);
        }
    }
}
