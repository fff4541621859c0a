//! Random submission interleavings against the reference leaderboard.

use bm_oracle::leaderboard::{scenario, Checker, Op, RevealPick};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn interleavings_hold_leaderboard_invariants((players, ops) in scenario(40)) {
        if let Err(e) = Checker::run(players, &ops) {
            prop_assert!(false, "{}", e);
        }
    }
}

#[test]
fn changes_made_while_paused_arrive_on_resume() {
    let ops = [
        Op::Submit { player: 0, level: 200 },
        Op::Pause(true),
        Op::Reveal(RevealPick::Top(1)),
        Op::Challenge { players: Some(0b10), label: 0 },
        Op::Submit { player: 1, level: 10 },
        Op::Pause(false),
        Op::Submit { player: 1, level: 10 },
    ];
    Checker::run(2, &ops).unwrap();
}
