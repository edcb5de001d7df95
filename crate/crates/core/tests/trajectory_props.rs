use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spoofscope_core::trajectory::{
    parse_fast, parse_trajectory, parse_turn, serialize_trajectory, Action, Cls, FastRecord, SubAnnotation,
    ToolResult, Trajectory, Turn,
};
use spoofscope_core::vistools::{ToolCall, ToolId};

const WORDS: &[&str] = &[
    "skin", "texture", "moire", "glare", "edge", "flat", "print", "looks", "natural", "specular", "depth",
    "frequency", "peaks", "the", "cheek", "border", "uniform", "(noisy)", "quote\"d", "üñí", "a,b", "50/50",
];

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..8);
    (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn cls(rng: &mut ChaCha8Rng) -> Cls {
    if rng.random_bool(0.5) {
        Cls::Real
    } else {
        Cls::Spoof
    }
}

/// A structurally valid trajectory drawn from `seed`.
fn trajectory(seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Trajectory::new(format!("sample-{seed}"), cls(&mut rng));
    if rng.random_bool(0.5) {
        t.hint = Some(sentence(&mut rng));
    }
    t.fast = match rng.random_range(0..3) {
        0 => None,
        1 => Some(FastRecord::from_raw(format!("{}<reason>{}</reason>", cls(&mut rng).token(), sentence(&mut rng)))),
        _ => Some(FastRecord::from_raw(sentence(&mut rng))),
    };
    let calls = rng.random_range(0..5);
    for i in 0..calls {
        let tool = ToolId::ALL[rng.random_range(0..ToolId::ALL.len())];
        let call = if tool == ToolId::ZoomIn {
            let x0: f64 = rng.random_range(0.0..0.5);
            let y0: f64 = rng.random_range(0.0..0.5);
            ToolCall::zoom([x0, y0, x0 + 0.4, y0 + 0.45])
        } else {
            ToolCall::new(tool)
        };
        t.turns.push(Turn::from_sub(SubAnnotation {
            think: sentence(&mut rng),
            action: Action::ToolCall(call),
        }));
        let ok = rng.random_bool(0.8);
        t.tool_results.push(ToolResult {
            turn: i,
            tool,
            ok,
            sha256: ok.then(|| format!("{:064x}", rng.random::<u128>())),
            path: (ok && rng.random_bool(0.5)).then(|| format!("renders/{seed}.t{i}.png")),
            expert_p: (ok && tool.has_expert()).then(|| rng.random::<f64>()),
            error: (!ok).then(|| "image too small".to_string()),
        });
    }
    match rng.random_range(0..3) {
        0 => {
            let c = cls(&mut rng);
            t.turns.push(Turn::from_sub(SubAnnotation {
                think: sentence(&mut rng),
                action: Action::Answer(c),
            }));
            t.final_cls = Some(c);
            t.final_logit = rng.random_bool(0.5).then(|| rng.random_range(-20.0..20.0));
        }
        1 => t.turns.push(Turn::from_raw(format!("<think>{}</think>", sentence(&mut rng)))),
        _ => {}
    }
    t
}

#[test]
fn generated_trajectories_are_valid_and_round_trip() {
    for seed in 0..100 {
        let t = trajectory(seed);
        t.validate(None).unwrap();
        let line = serialize_trajectory(&t);
        assert!(!line.contains('\n'));
        let back = parse_trajectory(&line).unwrap();
        assert_eq!(back, t, "seed {seed}");
        assert_eq!(serialize_trajectory(&back), line);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn parsers_are_total(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let text = String::from_utf8_lossy(&bytes);
        let _ = parse_fast(&text);
        let _ = parse_turn(&text);
        let _ = parse_trajectory(&text);
    }

    #[test]
    fn tag_soup_never_panics(parts in proptest::collection::vec(
        prop_oneof![
            Just("<think>"), Just("</think>"), Just("<tool_call>"), Just("</tool_call>"),
            Just("<answer>"), Just("</answer>"), Just("<Real>"), Just("<Spoof>"), Just("<reason>"),
            Just("</reason>"), Just("{\"name\":\"FFTTool\",\"arguments\":{}}"), Just(" "), Just("x"), Just("{"),
        ],
        0..12,
    )) {
        let text: String = parts.concat();
        if let Ok(sub) = parse_turn(&text) {
            prop_assert_eq!(parse_turn(&sub.to_text()).unwrap(), sub);
        }
        if let Ok(f) = parse_fast(&text) {
            prop_assert_eq!(parse_fast(&f.to_text()).unwrap(), f);
        }
    }
}
