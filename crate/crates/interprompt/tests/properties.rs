//! Property tests for the corpus statistics and the builder/parser inverse.

use proptest::prelude::*;

use interprompt::corpus::{
    contingency, delta_ratios, load_posts, write_posts, ContingencyTable, Format, Post,
};
use interprompt::parser::parse_completion;
use interprompt::prompt::{build_completion, PromptTemplate};

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,8}".prop_filter("not the empty-cue token", |w| w != "none")
}

fn cue() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..5).prop_map(|ws| ws.join(" "))
}

fn labelled_post() -> impl Strategy<Value = Post> {
    (any::<bool>(), any::<bool>(), cue(), cue(), word()).prop_map(
        |(tbe, pbu, tbe_cue, pbu_cue, extra)| Post {
            text: format!("today i {tbe_cue} and {pbu_cue} {extra}"),
            id: "prop".into(),
            tbe_label: tbe,
            pbu_label: pbu,
            tbe_cue: tbe.then_some(tbe_cue),
            pbu_cue: pbu.then_some(pbu_cue),
        },
    )
}

proptest! {
    #[test]
    fn contingency_cells_sum_to_input_length(labels in prop::collection::vec((any::<bool>(), any::<bool>()), 0..200)) {
        let posts: Vec<Post> = labels
            .iter()
            .enumerate()
            .map(|(i, &(tbe, pbu))| Post {
                id: format!("p{i}"),
                text: "text".into(),
                tbe_label: tbe,
                pbu_label: pbu,
                tbe_cue: None,
                pbu_cue: None,
            })
            .collect();
        let t = contingency(&posts);
        prop_assert_eq!(t.total(), posts.len() as u64);
    }

    #[test]
    fn delta_ratios_scale_invariant(n00 in 1u64..200, n01 in 1u64..200, n10 in 0u64..200, n11 in 0u64..200, c in 1u64..20) {
        let base = ContingencyTable { n00, n01, n10, n11 };
        let scaled = ContingencyTable {
            n00: n00 * c,
            n01: n01 * c,
            n10: n10 * c,
            n11: n11 * c,
        };
        let (a0, a1) = delta_ratios(&base).unwrap();
        let (b0, b1) = delta_ratios(&scaled).unwrap();
        prop_assert!((a0 - b0).abs() < 1e-12);
        prop_assert!((a1 - b1).abs() < 1e-12);
    }

    #[test]
    fn parse_inverts_build(post in labelled_post()) {
        let tpl = PromptTemplate::default();
        let completion = build_completion(&post, &tpl);
        let parsed = parse_completion(&completion.serialized, &tpl).unwrap();
        prop_assert!(parsed.exact, "diagnostics: {:?}", parsed.diagnostics);
        prop_assert_eq!(parsed.tbe_label, post.tbe_label);
        prop_assert_eq!(parsed.pbu_label, post.pbu_label);
        prop_assert_eq!(parsed.tbe_cue.as_deref(), post.tbe_cue.as_deref());
        prop_assert_eq!(parsed.pbu_cue.as_deref(), post.pbu_cue.as_deref());
    }

    #[test]
    fn load_serialize_load_roundtrips(posts in prop::collection::vec(labelled_post(), 1..20), use_csv in any::<bool>()) {
        let posts: Vec<Post> = posts
            .into_iter()
            .enumerate()
            .map(|(i, mut p)| {
                p.id = format!("p{i}");
                p
            })
            .collect();
        let format = if use_csv { Format::Csv } else { Format::Jsonl };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if use_csv { "d.csv" } else { "d.jsonl" });
        let mut buf = Vec::new();
        write_posts(&mut buf, &posts, format).unwrap();
        std::fs::write(&path, buf).unwrap();
        let report = load_posts(&path, format).unwrap();
        prop_assert!(report.errors.is_empty());
        prop_assert_eq!(report.posts, posts);
    }
}
