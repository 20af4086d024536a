use css_core::config::{DataSource, Method, RunConfig, Timing};
use css_core::data::ShapesConfig;
use css_core::protocol::Mode;
use proptest::prelude::*;

fn arb_config() -> impl Strategy<Value = RunConfig> {
    (
        (0usize..3, 0usize..3, any::<u64>(), any::<bool>(), proptest::option::of(0usize..3)),
        (1e-8f64..1.0, 1e-8f64..1.0, 0.0f64..2.0, any::<bool>(), any::<bool>(), any::<bool>()),
        (1e-5f64..1.0, 0.5f64..1.0, 0.0f64..0.99, 1usize..16, 1usize..50, 1usize..50),
        (1usize..8, 16usize..40, 1usize..300, any::<bool>(), proptest::collection::vec("[a-z]{1,6}", 0..4)),
    )
        .prop_map(|(run, pod, opt, data)| {
            let mut c = RunConfig::default();
            let (method, mode, seed, timing, ordering) = run;
            c.method = [Method::Plop, Method::Finetune, Method::Kd][method];
            c.mode = [Mode::Overlapped, Mode::Disjoint, Mode::DomainIncremental][mode];
            c.seed = seed;
            c.timing = if timing { Timing::Off } else { Timing::Wall };
            c.ordering = ordering.map(|r| {
                let mut v: Vec<usize> = (1..=5).collect();
                v.rotate_left(r);
                v
            });
            c.pod.lambda_features = pod.0;
            c.pod.lambda_logits = pod.1;
            c.kd_weight = pod.2;
            c.pod.square_values = pod.3;
            c.pseudo.normalized = pod.4;
            c.finetune_ignore_background = pod.5;
            c.optim.lr_next = opt.0;
            c.optim.lr_decay = opt.1;
            c.optim.momentum = opt.2;
            c.optim.batch_size = opt.3;
            c.optim.epochs_first = opt.4;
            c.optim.epochs_next = opt.5;
            c.data = if data.3 {
                DataSource::Files {
                    train: format!("/data/train{}", data.0).into(),
                    test: "/data/test".into(),
                }
            } else {
                DataSource::Shapes(ShapesConfig {
                    n_classes: data.0,
                    height: data.1 / 4 * 4,
                    width: 32,
                    n_train: data.2,
                    domains: data.4,
                    ..ShapesConfig::default()
                })
            };
            c.scenario = if c.mode == Mode::DomainIncremental { "dom-1-1".into() } else { "3-1".into() };
            c
        })
}

proptest! {
    #[test]
    fn text_round_trip(c in arb_config()) {
        let text = c.to_text();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_text(), text);
    }
}

#[test]
fn unknown_and_malformed_keys() {
    for bad in [
        "pod.lambda = 1",
        "seed = x",
        "pod.divisions = 1,3",
        "optim.momentum = 1",
        "mode = domain",
        "data.train = a",
        "shapes.n_classes = 2\ndata.train = a\ndata.test = b",
        "pseudo.tau_max = -1",
    ] {
        let err = RunConfig::parse(bad).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{bad}: {err}");
    }
}

#[test]
fn defaults_follow_the_documented_schedule() {
    let c = RunConfig::default();
    assert_eq!((c.optim.lr_first, c.optim.lr_next, c.optim.lr_decay), (1e-2, 1e-3, 0.9));
    assert_eq!(c.optim.momentum, 0.9);
    assert_eq!(c.pod.divisions, vec![1, 2, 4]);
    assert_eq!(c.pod.lambda_logits, 5e-4);
    assert_eq!(c.pseudo.tau_max, 1e-3);
    assert_eq!(RunConfig::parse("").unwrap(), c);
}
