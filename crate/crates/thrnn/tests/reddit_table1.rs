//! Preprocessing replication on the public Reddit dump.
//!
//! ```sh
//! THRNN_REDDIT_CSV=/data/reddit.csv cargo test -p thrnn --test reddit_table1 -- --ignored
//! ```

use thrnn::ingest::read_log;
use thrnn::ingest::Dataset;
use thrnn_core::pipeline::{preprocess, CorpusStats, PipelineConfig};

fn within_one_percent(got: usize, want: usize) -> bool {
    (got as f64 - want as f64).abs() <= 0.01 * want as f64
}

#[test]
#[ignore = "needs the public Reddit dump at THRNN_REDDIT_CSV"]
fn reddit_statistics_match_published_counts() {
    let path = std::env::var("THRNN_REDDIT_CSV").expect("set THRNN_REDDIT_CSV to the Reddit CSV");
    let raw = read_log(Dataset::Reddit, path.as_ref()).unwrap();
    let split = preprocess(&raw.interactions, &PipelineConfig::reddit()).unwrap();
    let stats = CorpusStats::of(&split);
    println!("{stats:?}");
    assert!(within_one_percent(stats.users, 18_271), "users {}", stats.users);
    assert!(within_one_percent(stats.sessions, 1_135_488), "sessions {}", stats.sessions);
    assert!(within_one_percent(stats.items, 27_452), "items {}", stats.items);
}
