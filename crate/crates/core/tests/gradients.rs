mod common;

#[test]
fn actor_and_critic_gradients_match_finite_differences() {
    for seed in 0..20 {
        let (actor, critic) = common::gradient_check(seed);
        for (name, g) in [("actor", &actor), ("critic", &critic)] {
            assert!(g.checked > 0, "seed {seed}: no {name} entries checked");
            assert!(g.kinks * 20 <= g.checked, "seed {seed}: {name} {g:?}");
            assert!(g.max_rel_err <= 1e-4, "seed {seed}: {name} {g:?}");
        }
    }
}
