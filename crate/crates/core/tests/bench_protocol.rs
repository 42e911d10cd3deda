use std::cell::Cell;
use std::time::Duration;

use mobileone::bench::{benchmark, DEFAULT_ITERS, DEFAULT_WARMUP};
use mobileone::{Error, Result, Tensor4};

#[test]
fn warmup_iterations_are_not_timed() {
    let calls = Cell::new(0usize);
    let runner = |x: &Tensor4<f64>| -> Result<Tensor4<f64>> {
        calls.set(calls.get() + 1);
        if calls.get() == 1 {
            std::thread::sleep(Duration::from_millis(200));
        }
        Ok(x.clone())
    };
    let stats = benchmark(runner, [1, 2, 4, 4], 1, 20).unwrap();
    assert_eq!(calls.get(), 21);
    assert_eq!(stats.iterations, 20);
    assert_eq!(stats.warmup, 1);
    assert!(stats.p99 < 100_000_000, "slow first call leaked into samples: {stats:?}");
}

#[test]
fn without_warmup_the_slow_call_is_measured() {
    let calls = Cell::new(0usize);
    let runner = |x: &Tensor4<f64>| -> Result<Tensor4<f64>> {
        calls.set(calls.get() + 1);
        if calls.get() == 1 {
            std::thread::sleep(Duration::from_millis(50));
        }
        Ok(x.clone())
    };
    let stats = benchmark(runner, [1, 1, 2, 2], 0, 5).unwrap();
    assert!(stats.p99 >= 50_000_000);
}

#[test]
fn defaults_follow_the_protocol() {
    assert_eq!(DEFAULT_ITERS, 1000);
    assert_eq!(DEFAULT_WARMUP, 1);
    let stats = benchmark(|x: &Tensor4<f32>| Ok(x.clone()), [1, 1, 1, 1], DEFAULT_WARMUP, DEFAULT_ITERS).unwrap();
    assert_eq!(stats.iterations, 1000);
    assert!(stats.min <= stats.median && stats.median <= stats.p90 && stats.p90 <= stats.p99);
}

#[test]
fn runner_failures_report_the_iteration() {
    let calls = Cell::new(0usize);
    let runner = |_: &Tensor4<f32>| -> Result<Tensor4<f32>> {
        calls.set(calls.get() + 1);
        if calls.get() == 4 {
            Err(Error::InvalidArgument("boom".into()))
        } else {
            Ok(Tensor4::zeros([1, 1, 1, 1]))
        }
    };
    match benchmark(runner, [1, 1, 1, 1], 1, 10) {
        Err(Error::Runner { iteration, .. }) => assert_eq!(iteration, 3),
        other => panic!("expected a runner error, got {other:?}"),
    }
    assert!(benchmark(|x: &Tensor4<f32>| Ok(x.clone()), [1, 1, 1, 1], 0, 0).is_err());
}
