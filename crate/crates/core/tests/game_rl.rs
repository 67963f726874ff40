use dealersim::game::{game_jacobian, rl_jacobian, softmax_score, FdStep, FnGame, JacobianMode, PlayerTrace};
use dealersim::policy::softmax;
use dealersim::rng::substream;
use rand::Rng;

const PAYOFF: [[[f64; 2]; 2]; 2] = [[[3.0, -1.0], [0.0, 2.0]], [[-2.0, 1.0], [2.5, -0.5]]];

fn value(player: usize, t: &[f64]) -> f64 {
    let p1 = softmax(&t[0..2]);
    let p2 = softmax(&t[2..4]);
    let mut v = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            v += p1[a] * p2[b] * PAYOFF[player][a][b];
        }
    }
    v
}

fn draw(p: &[f64], u: f64) -> usize {
    usize::from(u >= p[0])
}

#[test]
fn score_function_jacobian_matches_finite_differences() {
    let theta = [0.3, -0.2, -0.5, 0.4];
    let game = FnGame::new(vec![2, 2], value);
    let exact = game_jacobian(&game, &theta, JacobianMode::FiniteDiff(FdStep { rel: 1e-3 })).unwrap();

    let mut rng = substream(7, "bandit", 0);
    let p1 = softmax(&theta[0..2]);
    let p2 = softmax(&theta[2..4]);
    let episodes: Vec<Vec<PlayerTrace>> = (0..100_000)
        .map(|_| {
            let a = draw(&p1, rng.random());
            let b = draw(&p2, rng.random());
            [(0, a, &theta[0..2]), (1, b, &theta[2..4])]
                .iter()
                .map(|(i, act, logits)| {
                    let (s, h) = softmax_score(logits, *act);
                    PlayerTrace {
                        scores: vec![s],
                        hessians: vec![h],
                        rewards: vec![PAYOFF[*i][a][b]],
                    }
                })
                .collect()
        })
        .collect();
    let est = rl_jacobian(&episodes, &[2, 2], 1.0).unwrap();
    let scale = exact.abs().max();
    for r in 0..4 {
        for c in 0..4 {
            let (e, x) = (est[(r, c)], exact[(r, c)]);
            assert!((e - x).abs() <= 0.1 * x.abs().max(0.1 * scale), "({r},{c}) est {e} exact {x}");
        }
    }
}
