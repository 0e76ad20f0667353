mod common;

use proptest::prelude::*;
use stagesim::clients::{
    form_batch_chunked, form_batch_continuous, form_batch_mixed, form_batch_static, LlmItem, LlmLimits,
};
use stagesim::hardware::{
    llm_step_runtime, retrieval_latency, sample_hit_level, BatchProfile, HitOutcome, MemoryHierarchy, MemoryLevel,
    Terminal,
};
use stagesim::routing::{ClientView, Router};
use stagesim::workload::{parse_trace, write_trace, StageKind};
use stagesim::{run, RouterPolicy};

use common::*;

fn level() -> impl Strategy<Value = MemoryLevel> {
    (1e-9f64..1e-2, 1e8f64..1e12, 0.0f64..=1.0).prop_map(|(t, bw, h)| MemoryLevel {
        name: None,
        capacity: 0.0,
        lookup_latency: t,
        bandwidth: bw,
        hit_rate: h,
    })
}

fn hierarchy() -> impl Strategy<Value = MemoryHierarchy> {
    prop::collection::vec(level(), 1..=4).prop_map(|levels| MemoryHierarchy {
        levels,
        terminal: Terminal::Recompute,
    })
}

fn items() -> impl Strategy<Value = Vec<LlmItem>> {
    prop::collection::vec((0u64..5000, any::<bool>()), 0..40).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(key, (remaining_prefill, gen))| LlmItem {
                key,
                remaining_prefill,
                generating: remaining_prefill == 0 && gen,
            })
            .collect()
    })
}

fn limits() -> impl Strategy<Value = (LlmLimits, u64)> {
    (1u64..8192, 1usize..64, 1u64..4096).prop_map(|(t, b, c)| {
        (
            LlmLimits {
                max_batched_tokens: t,
                max_batch_size: b,
                chunk_size: None,
            },
            c.min(t),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn retrieval_latency_monotone_in_size(h in hierarchy(), size in 0f64..1e11, extra in 0f64..1e10, rc in 0f64..10.0) {
        let a = retrieval_latency(&h, size, rc).unwrap();
        let b = retrieval_latency(&h, size + extra, rc).unwrap();
        prop_assert!(b >= a * (1.0 - 1e-12));
    }

    #[test]
    fn retrieval_latency_monotone_in_lookup_and_bandwidth(h in hierarchy(), n in 0usize..4, size in 1f64..1e11, rc in 0f64..10.0) {
        let n = n % h.levels.len();
        let base = retrieval_latency(&h, size, rc).unwrap();
        let mut slower = h.clone();
        slower.levels[n].lookup_latency *= 2.0;
        prop_assert!(retrieval_latency(&slower, size, rc).unwrap() >= base * (1.0 - 1e-12));
        let mut wider = h.clone();
        wider.levels[n].bandwidth *= 2.0;
        prop_assert!(retrieval_latency(&wider, size, rc).unwrap() <= base * (1.0 + 1e-12));
    }

    #[test]
    fn higher_hit_rate_helps_the_fastest_level(h in hierarchy(), size in 1f64..1e11, bump in 0f64..1.0) {
        // Make the first level the fastest path, including recompute.
        let mut h = h;
        h.levels[0].lookup_latency = 0.0;
        h.levels[0].bandwidth = 1e13;
        let rc = 100.0;
        let base = retrieval_latency(&h, size, rc).unwrap();
        let mut better = h.clone();
        better.levels[0].hit_rate = (h.levels[0].hit_rate + bump).min(1.0);
        prop_assert!(retrieval_latency(&better, size, rc).unwrap() <= base * (1.0 + 1e-12));
    }

    #[test]
    fn sampled_level_is_reachable(h in hierarchy(), seed in any::<u64>()) {
        match sample_hit_level(&h, seed) {
            HitOutcome::Level(n) => {
                prop_assert!(h.levels[n].hit_rate > 0.0);
                prop_assert!(h.levels[..n].iter().all(|l| l.hit_rate < 1.0));
            }
            HitOutcome::Recompute => prop_assert!(h.levels.iter().all(|l| l.hit_rate < 1.0)),
        }
        prop_assert_eq!(sample_hit_level(&h, seed), sample_hit_level(&h, seed));
    }

    #[test]
    fn batch_formers_respect_limits(items in items(), (limits, chunk) in limits()) {
        for batch in [
            form_batch_continuous(&items, &limits),
            form_batch_static(&items, &limits),
            form_batch_chunked(&items, &limits, chunk),
            form_batch_mixed(&items, &limits, chunk),
        ] {
            prop_assert!(batch.fits(&limits), "{:?}", batch);
            let mut keys: Vec<usize> = batch.prefill_items.iter().map(|&(k, _)| k).chain(batch.decode_items.iter().copied()).collect();
            let n = keys.len();
            keys.sort_unstable();
            keys.dedup();
            prop_assert_eq!(keys.len(), n, "an item appears twice");
            for &(k, t) in &batch.prefill_items {
                prop_assert!(t > 0 && t <= items[k].remaining_prefill);
            }
            for &k in &batch.decode_items {
                prop_assert!(items[k].generating);
            }
        }
    }

    #[test]
    fn chunked_prefill_chunks_never_exceed_chunk_size(items in items(), (limits, chunk) in limits()) {
        for batch in [form_batch_chunked(&items, &limits, chunk), form_batch_mixed(&items, &limits, chunk)] {
            prop_assert!(batch.prefill_items.iter().all(|&(_, t)| t <= chunk));
        }
    }

    #[test]
    fn step_runtime_monotone_in_context(ctx in prop::collection::vec(1u64..32_768, 1..16), extra in 1u64..8192) {
        let cluster = a100();
        let model = small_model();
        let a = llm_step_runtime(&cluster, &model, &BatchProfile::decode(ctx.clone())).unwrap();
        let mut longer = ctx.clone();
        longer[0] += extra;
        let b = llm_step_runtime(&cluster, &model, &BatchProfile::decode(longer)).unwrap();
        prop_assert!(a > 0.0 && b >= a);
    }

    #[test]
    fn round_robin_is_uniform(m in 1usize..10, k in 1usize..20) {
        let mut router = Router::new(RouterPolicy::RoundRobin);
        let views: Vec<ClientView> = (0..m).map(ClientView::new).collect();
        let mut counts = vec![0usize; m];
        for j in 0..m * k {
            counts[router.route(&chat(j as u64, 0.0, 10, 1), StageKind::Prefill, &views).unwrap()] += 1;
        }
        prop_assert!(counts.iter().all(|&c| c == k));
    }

    #[test]
    fn least_outstanding_is_minimal(outstanding in prop::collection::vec(0usize..5, 1..10)) {
        let mut router = Router::new(RouterPolicy::LeastOutstanding);
        let views: Vec<ClientView> = outstanding
            .iter()
            .enumerate()
            .map(|(id, &o)| ClientView { outstanding: o, ..ClientView::new(id) })
            .collect();
        let pick = router.route(&chat(0, 0.0, 10, 1), StageKind::Decode, &views).unwrap();
        let min = *outstanding.iter().min().unwrap();
        prop_assert_eq!(pick, outstanding.iter().position(|&o| o == min).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn random_scenarios_conserve_and_repeat(seed in any::<u64>(), n in 1usize..150, b in 0usize..5, r in 0usize..9) {
        let batching = batching_strategies()[b];
        let sim = random_scenario(seed, n, batching, r);
        let requests = sim.requests.clone();
        let first = run(sim).unwrap();
        check_invariants(&first, &requests).map_err(TestCaseError::fail)?;
        let second = run(random_scenario(seed, n, batching, r)).unwrap();
        prop_assert_eq!(first.event_digest, second.event_digest);
        prop_assert_eq!(first.summary, second.summary);
    }

    #[test]
    fn trace_round_trip(seed in any::<u64>(), n in 1usize..50) {
        let sim = random_scenario(seed, n, "continuous", 0);
        let mut buf = Vec::new();
        write_trace(&sim.requests, &mut buf).unwrap();
        let back = parse_trace(&buf[..]).unwrap();
        prop_assert_eq!(back, sim.requests);
    }
}
