mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use remembra::config::{Experiment, Method};
use remembra::engine::{
    run_meta_training, CurriculumSchedule, Episode, EpisodeControl, MetaTrainer, TaskStream, Transition,
};
use remembra::experiment::{run_method, Setup, TrainTasks};
use remembra::meta::{reset_state, MetaParams};

fn fixture(schedule: CurriculumSchedule) -> (Setup, TaskStream, MetaTrainer) {
    let mut cfg = common::tiny_config(Experiment::Synthetic);
    cfg.episode.record_batches = true;
    let setup = Setup::build(&cfg).unwrap();
    let stream = match &setup.train_tasks {
        TrainTasks::Fixed(s) => s.clone(),
        TrainTasks::Episodic(_) => unreachable!("synthetic runs train on a fixed stream"),
    };
    let theta = MetaParams::for_network(&setup.pool[0], &cfg.meta, 3).unwrap();
    let trainer = MetaTrainer::new(theta, cfg.episode.clone(), schedule).unwrap();
    (setup, stream, trainer)
}

fn lenient() -> CurriculumSchedule {
    CurriculumSchedule {
        threshold0: 1e12,
        threshold_cap: 1e12,
        ..CurriculumSchedule::two_task()
    }
}

#[test]
fn teacher_trajectory_ignores_the_rule() {
    let (setup, stream, fresh) = fixture(lenient());
    let mut perturbed = fresh.clone();
    for t in perturbed.theta.tensors_mut() {
        *t = t.map(|v| v + 0.25);
    }
    let mut traces = Vec::new();
    let mut students = Vec::new();
    for mut trainer in [fresh, perturbed] {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ep = Episode::start(1, &setup.pool[0], &stream, &trainer).unwrap();
        let mut trace = Vec::new();
        loop {
            let out = ep.step(&mut trainer, &mut rng).unwrap();
            assert_ne!(out.transition, Transition::Restart);
            trace.push(out.trace.unwrap());
            if out.transition == Transition::Done {
                break;
            }
        }
        students.push(ep.student());
        traces.push(trace);
    }
    assert_eq!(traces[0].len(), trainer_steps());
    assert_eq!(traces[0], traces[1]);
    assert_ne!(students[0], students[1], "the two rules should move the student differently");
}

fn trainer_steps() -> usize {
    common::tiny_config(Experiment::Synthetic).episode.inner_steps
}

#[test]
fn restart_returns_to_episode_start_and_keeps_theta() {
    let strict = CurriculumSchedule {
        threshold0: 1e-12,
        threshold_cap: 1e-12,
        ..CurriculumSchedule::two_task()
    };
    let (setup, stream, mut trainer) = fixture(strict);
    let theta0 = trainer.theta.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ep = Episode::start(1, &setup.pool[0], &stream, &trainer).unwrap();
    let (w0, state0, teacher0) = (ep.student(), ep.meta_state(), ep.teacher.clone());
    let out = ep.step(&mut trainer, &mut rng).unwrap();
    assert_eq!(out.transition, Transition::Restart);
    assert!(out.loss.is_finite() && out.loss > 1e-12);
    assert_eq!(ep.student(), w0);
    assert_eq!(ep.teacher, teacher0);
    assert_eq!(ep.meta_state(), state0);
    assert_eq!(ep.meta_state(), reset_state(&trainer.theta));
    assert_eq!((ep.control.k, ep.control.t, ep.control.s), (2, 0, 0));
    assert_eq!(ep.window.live_updates(), 0);
    assert_ne!(trainer.theta, theta0, "the meta-update before the restart must persist");
}

#[test]
fn scripted_losses_drive_restart_and_truncation() {
    let mut c = EpisodeControl::new(1, 2, 10, CurriculumSchedule::two_task());
    assert_eq!(c.tbptt_steps(), 5);
    for i in 1..=4 {
        assert_eq!(c.record(1.0), (Transition::Continue, false), "step {i}");
    }
    assert_eq!(c.record(1.0), (Transition::Continue, true));
    assert_eq!(c.s, 0);
    assert_eq!(c.record(19.0), (Transition::Continue, false));
    assert_eq!(c.record(20.0), (Transition::Continue, false), "the threshold itself is allowed");
    assert_eq!(c.record(20.5), (Transition::Restart, true));
    assert_eq!((c.k, c.t, c.s), (2, 0, 0));
    assert_eq!(c.record(f64::NAN), (Transition::Restart, true));
    for _ in 0..9 {
        assert_eq!(c.record(1.0).0, Transition::Continue);
    }
    assert_eq!(c.record(1.0).0, Transition::Done);
}

#[test]
fn window_never_exceeds_tbptt_steps() {
    let schedule = CurriculumSchedule {
        tbptt0: 3,
        tbptt_cap: 3,
        ..lenient()
    };
    let (setup, stream, mut trainer) = fixture(schedule);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ep = Episode::start(1, &setup.pool[0], &stream, &trainer).unwrap();
    let mut seen = Vec::new();
    loop {
        let out = ep.step(&mut trainer, &mut rng).unwrap();
        assert!(out.window_updates <= 3);
        assert!(ep.window.live_updates() <= 3);
        if out.truncated {
            assert_eq!(ep.window.live_updates(), 0);
        }
        seen.push(out.window_updates);
        if out.transition == Transition::Done {
            break;
        }
    }
    assert_eq!(seen, [1, 2, 3, 1, 2, 3]);

    let log = run_meta_training(&mut trainer, &stream, &setup.pool, 9).unwrap();
    assert!(log.steps.iter().all(|r| r.tbptt_s <= 3));
}

#[test]
fn every_method_sees_the_same_batches() {
    let cfg = common::tiny_config(Experiment::NewClasses);
    let setup = Setup::build(&cfg).unwrap();
    let theta = MetaParams::for_network(&setup.test_checkpoint, &cfg.meta, 0).unwrap();
    let runs: Vec<_> = [Method::Teacher, Method::Meta, Method::Sgd, Method::SgdSmall, Method::Ewc, Method::Lwf]
        .into_iter()
        .map(|m| run_method(&cfg, &setup, m, Some(&theta), 4).unwrap())
        .collect();
    assert_eq!(runs[0].batch_hashes.len(), cfg.unroll.steps_per_task);
    for r in &runs[1..] {
        assert_eq!(r.batch_hashes, runs[0].batch_hashes, "{:?}", r.method);
    }
    let other = run_method(&cfg, &setup, Method::Sgd, None, 5).unwrap();
    assert_ne!(other.batch_hashes, runs[0].batch_hashes);
}

#[test]
fn resampled_episodes_keep_classes_disjoint() {
    let cfg = common::tiny_config(Experiment::NewClasses);
    let setup = Setup::build(&cfg).unwrap();
    let TrainTasks::Episodic(ep) = &setup.train_tasks else {
        panic!("new-classes trains on resampled tasks");
    };
    let a: Vec<usize> = ep.sample(1).unwrap().iter().flat_map(|t| t.train.classes.clone()).collect();
    let b: Vec<usize> = ep.sample(2).unwrap().iter().flat_map(|t| t.train.classes.clone()).collect();
    assert_ne!(a, b);
    for classes in [&a, &b] {
        let mut sorted = classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), classes.len());
        assert!(classes.iter().all(|c| ep.pool.contains(c)));
    }
}
