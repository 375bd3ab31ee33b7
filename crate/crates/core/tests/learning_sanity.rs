//! A single-antenna-UE toy with a fixed channel: a short training run must
//! beat the untrained policy on almost every seed.

use cellfree_core::channel::ChannelGrid;
use cellfree_core::ddpg::{encode_state, local_state_len, ActionCodec, AgentNets, DdpgConfig, Learner, LocalAction};
use cellfree_core::linalg::random_gaussian;
use cellfree_core::rsma::{self, Association, CommonRateShares, PrecoderSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const M: usize = 2;
const N0: f64 = 0.1;

fn rate(ch: &ChannelGrid, codec: &ActionCodec, raw: &[f64], pre: &mut PrecoderSet) -> f64 {
    let d = codec.decode(&LocalAction(raw.to_vec()), &[true]).unwrap();
    pre.common[0] = d.common;
    *pre.private_mut(0, 0) = d.private[0].clone();
    let shares = CommonRateShares::new(d.shares).unwrap();
    rsma::rates(ch, pre, &Association::all_ones(1, 1), &shares, N0).unwrap().min_rate
}

/// Greedy reward before and after 200 training iterations.
fn train(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ch = ChannelGrid::zeros(1, 1, M, 1);
    ch.set(0, 0, random_gaussian(&mut rng, M, 1));
    let codec = ActionCodec { n_ues: 1, m_ap: M, m_ue: 1, p_max: 1.0, sdma: false };
    let cfg = DdpgConfig::default();
    let nets = AgentNets::new(local_state_len(1, 1), codec.action_len(), codec.action_len(), &cfg, &mut rng);
    let mut learner = Learner::new(nets, &cfg);
    let mut pre = PrecoderSet::zeros(1, 1, M, 1);
    let features = |pre: &PrecoderSet| encode_state(&ch, pre, 0).features(N0);
    let greedy = |l: &Learner, pre: &PrecoderSet| {
        let mut p = pre.clone();
        let a = l.nets.actor.forward(&features(&p)).unwrap();
        rate(&ch, &codec, &a, &mut p)
    };
    let before = greedy(&learner, &pre);
    for _ in 0..200 {
        let s = features(&pre);
        let a = learner.nets.act(&s, 0.2, &mut rng).unwrap();
        let r = rate(&ch, &codec, &a, &mut pre);
        learner.observe(s, a, r, features(&pre), &cfg, &mut rng).unwrap();
    }
    (before, greedy(&learner, &pre))
}

#[test]
fn short_training_beats_the_initial_policy() {
    let wins = (0..10)
        .filter(|&s| {
            let (before, after) = train(s);
            after > before
        })
        .count();
    assert!(wins >= 9, "improved on {wins}/10 seeds");
}
