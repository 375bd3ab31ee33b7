use cellfree_core::ap_selection::SelectionInstance;
use cellfree_core::config::ExperimentConfig;
use cellfree_core::pipeline::{augment_association, run, NoObserver, Observer, Phase, StepEvent};
use cellfree_core::rsma::Association;
use proptest::prelude::*;

fn small(mode: &str, extra: &str) -> ExperimentConfig {
    let toml = format!(
        "mode = \"{mode}\"\nn_aps = 2\nn_ues = 3\nm_ap = 2\nm_ue = 1\nepisodes = 8\nfinetune_episodes = 3\nepisode_len = 4\nselection_window = 2\nt_fl = 2\n{extra}"
    );
    ExperimentConfig::from_toml_str(&toml).unwrap()
}

#[derive(Default)]
struct Steps {
    /// Largest |entry| of any common precoder seen.
    common_peak: f64,
    /// Largest |entry| of a private precoder on an unselected link during fine-tuning.
    unselected_peak: f64,
    finetune_steps: usize,
}

impl Observer for Steps {
    fn wants_steps(&self) -> bool {
        true
    }
    fn on_step(&mut self, ev: &StepEvent<'_>) {
        for c in &ev.precoders.common {
            self.common_peak = c.iter().fold(self.common_peak, |m, z| m.max(z.norm()));
        }
        if ev.phase == Phase::Finetune {
            self.finetune_steps += 1;
            for k in 0..ev.assoc.n_ues {
                for n in 0..ev.assoc.n_aps {
                    if !ev.assoc.get(k, n) {
                        let p = ev.precoders.private(k, n);
                        self.unselected_peak = p.iter().fold(self.unselected_peak, |m, z| m.max(z.norm()));
                    }
                }
            }
        }
    }
}

#[test]
fn series_has_one_row_per_episode() {
    let cfg = small("fdrl-rsma", "");
    let r = run(&cfg, 3, 1, &mut NoObserver).unwrap();
    assert_eq!(r.records.len(), 8);
    assert_eq!(r.records.iter().filter(|e| e.phase == Phase::Finetune).count(), 3);
    assert_eq!(r.associations.len(), 1);
    assert!(r.min_rates().iter().all(|x| x.is_finite() && *x >= 0.0));
}

#[test]
fn outer_rounds_repeat_the_series() {
    let cfg = small("fdrl-rsma", "outer_rounds = 2");
    let r = run(&cfg, 3, 1, &mut NoObserver).unwrap();
    assert_eq!(r.records.len(), 16);
    assert_eq!(r.associations.len(), 2);
}

#[test]
fn same_seed_same_series() {
    for mode in ["fdrl-rsma", "drl-rsma-centralized"] {
        let cfg = small(mode, "");
        let a = run(&cfg, 11, 1, &mut NoObserver).unwrap();
        let b = run(&cfg, 11, 2, &mut NoObserver).unwrap();
        assert_eq!(a.records, b.records, "{mode}");
        assert_eq!(a.metrics_csv(), b.metrics_csv());
    }
}

#[test]
fn sdma_never_transmits_a_common_stream() {
    let cfg = small("fdrl-sdma", "");
    let mut obs = Steps::default();
    let r = run(&cfg, 5, 1, &mut obs).unwrap();
    assert_eq!(obs.common_peak, 0.0);
    assert!(r.records.iter().all(|e| e.common_rate == 0.0));
}

#[test]
fn finetuning_leaves_unselected_links_silent() {
    // A tight UE limit forces some links off.
    let cfg = small("fdrl-rsma", "n_ue_max = 1");
    let mut obs = Steps::default();
    let r = run(&cfg, 2, 1, &mut obs).unwrap();
    assert!(r.associations[0].flags().iter().any(|g| !g));
    assert_eq!(obs.finetune_steps, 3 * 4);
    assert_eq!(obs.unselected_peak, 0.0);
}

fn instance() -> impl Strategy<Value = (SelectionInstance, Vec<bool>)> {
    (1usize..4, 1usize..4).prop_flat_map(|(k, n)| {
        (
            prop::collection::vec(0.0f64..2.0, k * n),
            prop::collection::vec(0.0f64..1.0, k * n),
            prop::collection::vec(0.0f64..0.5, n),
            1usize..=n,
            prop::collection::vec(any::<bool>(), k * n),
        )
            .prop_map(move |(lambda_max, private_power, common_power, n_ue_max, g)| {
                let inst = SelectionInstance {
                    n_ues: k,
                    n_aps: n,
                    lambda_max,
                    private_power,
                    common_power,
                    p_max: 1.5,
                    n_ue_max,
                };
                (inst, g)
            })
    })
}

proptest! {
    #[test]
    fn augmentation_keeps_links_feasibility_and_objective((inst, g) in instance()) {
        let start = Association::from_flags(inst.n_ues, inst.n_aps, g).unwrap();
        prop_assume!(inst.is_feasible(&start));
        let mut a = start.clone();
        let added = augment_association(&mut a, &inst);
        let grown = a.flags().iter().zip(start.flags()).filter(|(x, y)| **x && !**y).count();
        prop_assert_eq!(added, grown);
        prop_assert!(start.flags().iter().zip(a.flags()).all(|(s, x)| !s || *x));
        prop_assert!(inst.is_feasible(&a));
        prop_assert!(inst.objective(&a) >= inst.objective(&start));
        // Nothing more fits afterwards.
        for k in 0..inst.n_ues {
            for n in 0..inst.n_aps {
                if !a.get(k, n) {
                    let mut b = a.clone();
                    b.set(k, n, true);
                    prop_assert!(!inst.is_feasible(&b));
                }
            }
        }
    }
}
