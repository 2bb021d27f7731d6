//! Property tests over the engine's core contracts: annotation confidences,
//! vote rules, prompt assembly flags, hashing, percentage formatting,
//! demonstration sampling, label parsing, and TSV ingestion round-trips.

use std::collections::BTreeMap;
use std::io::Write as _;

use proptest::prelude::*;

use supericl::backend::LogitVector;
use supericl::dataset::{
    builtin_task, load_split, render_input, sample_demonstrations, ColumnMap, DatasetSplit,
    Example, FileFormat, LabelSpace, SplitName, SplitName::Train, TaskSpec,
};
use supericl::ensemble::{
    annotate, majority_vote, weighted_vote, AnnotationSet, ConfidenceMode, SlmAnnotation,
};
use supericl::experiment::{parse_label, sample_variance};
use supericl::prompt::{
    build_prompt, format_percent, prompt_hash, AblationFlags, DemonstrationBlock, ANSWER_SLOT,
};

/// Non-empty text with no edge whitespace and no separator characters, so
/// rendering and ingestion properties are not confounded by trimming.
fn word() -> impl Strategy<Value = String> {
    "[a-z0-9]([a-z0-9 ]{0,16}[a-z0-9])?"
}

fn task_for_len(n: usize) -> TaskSpec {
    builtin_task(if n == 2 { "sst2" } else { "mnli" }).unwrap()
}

fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn example(id: &str, sentence: &str, gold: Option<&str>) -> Example {
    Example::new(
        id,
        BTreeMap::from([("sentence".to_string(), sentence.to_string())]),
        gold.map(String::from),
    )
}

proptest! {
    // ----------------------------------------------------------------- votes

    #[test]
    fn annotation_prediction_is_the_argmax_label(
        values in prop::collection::vec(-25.0f64..25.0, 2..=3),
        softmax in any::<bool>(),
    ) {
        let task = task_for_len(values.len());
        let mode = if softmax { ConfidenceMode::Softmax } else { ConfidenceMode::Sigmoid };
        let a = annotate(
            &LogitVector::new(values.clone()).unwrap(),
            &task.label_space,
            "M",
            mode,
        ).unwrap();
        prop_assert!(a.confidence > 0.0 && a.confidence < 1.0);
        prop_assert_eq!(&a.predicted_label, &task.label_space.labels()[first_argmax(&values)]);
    }

    #[test]
    fn sigmoid_confidence_matches_the_logistic_formula(
        values in prop::collection::vec(-25.0f64..25.0, 2..=3),
    ) {
        let task = task_for_len(values.len());
        let a = annotate(
            &LogitVector::new(values.clone()).unwrap(),
            &task.label_space,
            "M",
            ConfidenceMode::Sigmoid,
        ).unwrap();
        let winning = values[first_argmax(&values)];
        let expected = 1.0 / (1.0 + (-winning).exp());
        prop_assert!((a.confidence - expected).abs() <= 1e-12);
    }

    #[test]
    fn softmax_annotation_is_shift_invariant(
        values in prop::collection::vec(-20.0f64..20.0, 3),
        shift in -15.0f64..15.0,
    ) {
        // Keep the winner well separated so the shift cannot reorder floats.
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assume!(sorted[0] - sorted[1] >= 1e-6);

        let task = builtin_task("mnli").unwrap();
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let a = annotate(
            &LogitVector::new(values).unwrap(),
            &task.label_space,
            "M",
            ConfidenceMode::Softmax,
        ).unwrap();
        let b = annotate(
            &LogitVector::new(shifted).unwrap(),
            &task.label_space,
            "M",
            ConfidenceMode::Softmax,
        ).unwrap();
        prop_assert_eq!(&a.predicted_label, &b.predicted_label);
        prop_assert!((a.confidence - b.confidence).abs() <= 1e-9);
    }

    #[test]
    fn majority_vote_picks_the_unique_mode_or_the_last_prediction(
        labels in prop::collection::vec(
            prop::sample::select(vec!["alpha", "beta", "gamma"]),
            1..=7,
        ),
        rotation in 0usize..7,
    ) {
        let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
        for l in &labels {
            *tally.entry(l).or_default() += 1;
        }
        let top = *tally.values().max().unwrap();
        let modes: Vec<&str> = tally
            .iter()
            .filter(|(_, n)| **n == top)
            .map(|(l, _)| *l)
            .collect();
        let expected = if modes.len() == 1 { modes[0] } else { labels[labels.len() - 1] };
        prop_assert_eq!(majority_vote(&labels).unwrap(), expected);

        // A strict winner survives any rotation of the ensemble order.
        if modes.len() == 1 {
            let mut rotated = labels.clone();
            rotated.rotate_left(rotation % labels.len());
            prop_assert_eq!(majority_vote(&rotated).unwrap(), expected);
        }
    }

    #[test]
    fn weighted_vote_follows_the_total_confidence_mass(
        entries in prop::collection::vec((0usize..3, 0.01f64..0.99), 1..=6),
    ) {
        let task = builtin_task("mnli").unwrap();
        let labels = task.label_space.labels();
        let mut sums = [0.0f64; 3];
        let annotations: Vec<SlmAnnotation> = entries
            .iter()
            .enumerate()
            .map(|(i, (idx, confidence))| {
                sums[*idx] += confidence;
                SlmAnnotation {
                    model_id: format!("m{i}"),
                    predicted_label: labels[*idx].clone(),
                    confidence: *confidence,
                }
            })
            .collect();
        // Skip near-ties: their outcome is pinned by a separate order rule.
        let mut sorted = sums;
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assume!(sorted[0] - sorted[1] >= 1e-9);

        let set = AnnotationSet::new(annotations).unwrap();
        let best = first_argmax(&sums);
        prop_assert_eq!(weighted_vote(&set).unwrap(), labels[best].clone());
    }

    #[test]
    fn unanimous_annotations_win_both_votes(
        idx in 0usize..3,
        confidences in prop::collection::vec(0.01f64..0.99, 1..=5),
    ) {
        let task = builtin_task("mnli").unwrap();
        let label = task.label_space.labels()[idx].clone();
        let annotations: Vec<SlmAnnotation> = confidences
            .iter()
            .enumerate()
            .map(|(i, confidence)| SlmAnnotation {
                model_id: format!("m{i}"),
                predicted_label: label.clone(),
                confidence: *confidence,
            })
            .collect();
        let set = AnnotationSet::new(annotations).unwrap();
        prop_assert_eq!(majority_vote(&set.predicted_labels()).unwrap(), label.clone());
        prop_assert_eq!(weighted_vote(&set).unwrap(), label);
    }

    // --------------------------------------------------------------- prompts

    #[test]
    fn prompt_flags_gate_prediction_and_confidence_lines(
        include_context_predictions in any::<bool>(),
        include_confidences in any::<bool>(),
        include_test_predictions in any::<bool>(),
        demo_sentence in word(),
        test_sentence in word(),
    ) {
        let task = builtin_task("sst2").unwrap();
        let annotations = AnnotationSet::new(vec![
            annotate(
                &LogitVector::new(vec![2.0, -2.0]).unwrap(),
                &task.label_space,
                "M-One",
                ConfidenceMode::Sigmoid,
            ).unwrap(),
            annotate(
                &LogitVector::new(vec![-1.5, 1.5]).unwrap(),
                &task.label_space,
                "Z-Two",
                ConfidenceMode::Sigmoid,
            ).unwrap(),
        ]).unwrap();
        let flags = AblationFlags {
            include_context_predictions,
            include_confidences,
            include_test_predictions,
        };
        let demo = DemonstrationBlock {
            rendered_input: render_input(&example("d0", &demo_sentence, Some("positive")), &task),
            annotations: annotations.clone(),
            gold_label: "positive".to_string(),
        };
        let bundle = build_prompt(
            &task,
            std::slice::from_ref(&demo),
            &render_input(&example("e0", &test_sentence, Some("negative")), &task),
            &annotations,
            &["M-One".to_string(), "Z-Two".to_string()],
            &flags,
        );

        prop_assert_eq!(bundle.user_text.contains(" prediction: "), include_test_predictions);
        prop_assert_eq!(
            bundle.user_text.contains("(confidence: "),
            include_test_predictions && include_confidences,
        );
        prop_assert_eq!(bundle.system_text.contains(" prediction: "), include_context_predictions);
        prop_assert_eq!(
            bundle.system_text.contains("(confidence: "),
            include_context_predictions && include_confidences,
        );
        prop_assert!(bundle.user_text.ends_with(ANSWER_SLOT));
        prop_assert_eq!(
            bundle.prompt_hash,
            prompt_hash(&bundle.system_text, &bundle.user_text),
        );
    }

    #[test]
    fn prompt_hash_is_stable_hex_and_separates_the_parts(
        system in "[ -~\n]{0,40}",
        user in "[ -~\n]{0,40}",
    ) {
        let hash = prompt_hash(&system, &user);
        prop_assert_eq!(hash.len(), 64);
        prop_assert!(hash.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        prop_assert_eq!(&prompt_hash(&system, &user), &hash);
        // Appending changes the hash; so does moving a byte across the
        // system/user boundary (the parts are length-prefixed).
        prop_assert_ne!(&prompt_hash(&system, &format!("{user}x")), &hash);
        prop_assert_ne!(
            prompt_hash(&format!("{system}x"), &user),
            prompt_hash(&system, &format!("x{user}")),
        );
    }

    #[test]
    fn render_input_is_injective_over_sentence_pairs(
        a1 in word(), a2 in word(), b1 in word(), b2 in word(),
    ) {
        let task = builtin_task("mrpc").unwrap();
        let render = |s1: &str, s2: &str| {
            let fields = BTreeMap::from([
                ("sentence1".to_string(), s1.to_string()),
                ("sentence2".to_string(), s2.to_string()),
            ]);
            render_input(&Example::new("x", fields, None), &task)
        };
        if (a1.as_str(), a2.as_str()) != (b1.as_str(), b2.as_str()) {
            prop_assert_ne!(render(&a1, &a2), render(&b1, &b2));
        } else {
            prop_assert_eq!(render(&a1, &a2), render(&b1, &b2));
        }
    }

    // ------------------------------------------------------------ formatting

    #[test]
    fn format_percent_renders_exact_hundredths(k in -10_000i64..=10_000) {
        let expected = format!(
            "{}{}.{:02}",
            if k < 0 { "-" } else { "" },
            (k / 100).abs(),
            (k % 100).abs(),
        );
        prop_assert_eq!(format_percent(k as f64 / 10_000.0), expected);
    }

    #[test]
    fn format_percent_rounds_within_half_a_hundredth(value in -1.0f64..=1.0) {
        let rendered = format_percent(value);
        let parsed: f64 = rendered.parse().unwrap();
        prop_assert!(
            (parsed - value * 100.0).abs() <= 0.005 + 1e-9,
            "{value} rendered as {rendered}",
        );
    }

    #[test]
    fn sample_variance_shifts_and_scales_like_a_variance(
        values in prop::collection::vec(-100.0f64..100.0, 2..=8),
        shift in -50.0f64..50.0,
        scale in -3.0f64..3.0,
    ) {
        let v = sample_variance(&values).unwrap();
        prop_assert!(v >= -1e-9);

        let shifted: Vec<f64> = values.iter().map(|x| x + shift).collect();
        let vs = sample_variance(&shifted).unwrap();
        prop_assert!((vs - v).abs() <= 1e-6 * (1.0 + v.abs()));

        let scaled: Vec<f64> = values.iter().map(|x| x * scale).collect();
        let vc = sample_variance(&scaled).unwrap();
        prop_assert!((vc - scale * scale * v).abs() <= 1e-6 * (1.0 + (scale * scale * v).abs()));

        prop_assert_eq!(sample_variance(&values[..1]), None);
    }

    // -------------------------------------------------------------- sampling

    #[test]
    fn demonstration_sampling_is_deterministic_and_prefix_stable(
        n in 1usize..=32,
        seed in any::<u64>(),
        a in 0usize..=32,
        b in 0usize..=32,
    ) {
        let examples: Vec<Example> = (0..n)
            .map(|i| example(&format!("d{i}"), &format!("sentence {i}"), Some("positive")))
            .collect();
        let split = DatasetSplit::new("sst2", Train, examples).unwrap();
        let (lo, hi) = {
            let (x, y) = (a.min(n), b.min(n));
            (x.min(y), x.max(y))
        };
        let ids = |k: usize| -> Vec<String> {
            sample_demonstrations(&split, k, seed)
                .unwrap()
                .into_iter()
                .map(|e| e.example_id)
                .collect()
        };

        let large = ids(hi);
        let small = ids(lo);
        prop_assert_eq!(&large[..lo], small.as_slice());
        prop_assert_eq!(ids(hi), large.clone());

        let unique: std::collections::BTreeSet<&String> = large.iter().collect();
        prop_assert_eq!(unique.len(), large.len());
        for id in &large {
            prop_assert!(split.examples().iter().any(|e| &e.example_id == id));
        }
    }

    // --------------------------------------------------------------- parsing

    #[test]
    fn parse_label_recovers_decorated_labels(
        task_id in prop::sample::select(vec!["sst2", "mrpc", "mnli"]),
        pick in any::<prop::sample::Index>(),
        casing in 0u8..3,
        punct in prop::sample::select(vec!["", ".", ",", "!", "?", ";", ":", "\"", "'", "`"]),
        echoed in any::<bool>(),
        chatter in "[a-z0-9 \n]{0,30}",
    ) {
        let task = builtin_task(task_id).unwrap();
        let label = pick.get(task.label_space.labels()).clone();
        let cased = match casing {
            0 => label.clone(),
            1 => label.to_uppercase(),
            _ => {
                let mut chars = label.chars();
                chars.next().unwrap().to_uppercase().collect::<String>() + chars.as_str()
            }
        };
        let raw = if echoed {
            format!("{chatter}\nLabel: {cased}{punct}")
        } else {
            format!("  {cased}{punct} ")
        };
        prop_assert_eq!(parse_label(&raw, &task.label_space), Some(label));
    }

    #[test]
    fn parse_label_accepts_unique_prefixes(
        task_id in prop::sample::select(vec!["sst2", "mrpc", "mnli"]),
        pick in any::<prop::sample::Index>(),
        cut in any::<prop::sample::Index>(),
        uppercased in any::<bool>(),
    ) {
        let task = builtin_task(task_id).unwrap();
        let labels = task.label_space.labels();
        let label = pick.get(labels);
        let cut = 1 + cut.index(label.len());
        let prefix = if uppercased {
            label[..cut].to_uppercase()
        } else {
            label[..cut].to_string()
        };
        let matching = labels
            .iter()
            .filter(|l| l.to_lowercase().starts_with(&prefix.to_lowercase()))
            .count();
        let expected = if task.label_space.canonicalize(&prefix).is_some() || matching == 1 {
            Some(label.clone())
        } else {
            None
        };
        prop_assert_eq!(parse_label(&prefix, &task.label_space), expected);
    }
}

// File IO per case: keep the case count modest.
proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tsv_rows_round_trip_through_the_loader(
        rows in prop::collection::vec(
            (
                word(),
                prop::sample::select(vec![
                    "positive", "Positive", "POSITIVE", "negative", "Negative", "NEGATIVE",
                ]),
            ),
            1..=10,
        ),
    ) {
        let task = builtin_task("sst2").unwrap();
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "sentence\tlabel").unwrap();
        for (sentence, label) in &rows {
            writeln!(file, "{sentence}\t{label}").unwrap();
        }
        file.flush().unwrap();

        let columns = ColumnMap {
            fields: BTreeMap::from([("sentence".to_string(), "sentence".to_string())]),
            label_column: Some("label".to_string()),
            id_column: None,
        };
        let split = load_split(file.path(), FileFormat::Tsv, &columns, &task, SplitName::Eval)
            .unwrap();
        prop_assert_eq!(split.len(), rows.len());
        for (i, (loaded, (sentence, label))) in split.examples().iter().zip(&rows).enumerate() {
            prop_assert_eq!(&loaded.example_id, &format!("r{i}"));
            prop_assert_eq!(&loaded.field_values["sentence"], sentence);
            let canonical = label.to_lowercase();
            prop_assert_eq!(loaded.gold_label.as_deref(), Some(canonical.as_str()));
        }
    }
}

#[test]
fn ambiguous_prefixes_never_parse() {
    let space = LabelSpace::new(["positive", "positively_glowing"]).unwrap();
    assert_eq!(parse_label("pos", &space), None);
    assert_eq!(
        parse_label("positively", &space),
        Some("positively_glowing".into())
    );
    // An exact label wins even when it prefixes another label.
    assert_eq!(parse_label("positive", &space), Some("positive".into()));
}
