//! Parse a narrative record, split its trace by word timings, merge words
//! into scored phrases, and print the resulting aligned segments.

use tracekit::ingest::{merge_to_phrases, parse_record, segment_by_words};
use tracekit::trace::PhraseSpan;
use tracekit::weights::{heuristic_phrase_spans, heuristic_score, DEFAULT_EPS_BASE};

fn main() {
    let line = r#"{
        "image_id": "demo-001",
        "image_width": 640, "image_height": 480,
        "caption": "the red hat on the small table",
        "timed_caption": [
            {"utterance": "the",   "start_time": 0.0, "end_time": 0.4},
            {"utterance": "red",   "start_time": 0.4, "end_time": 0.8},
            {"utterance": "hat",   "start_time": 0.8, "end_time": 1.2},
            {"utterance": "on",    "start_time": 1.2, "end_time": 1.5},
            {"utterance": "the",   "start_time": 1.5, "end_time": 1.8},
            {"utterance": "small", "start_time": 1.8, "end_time": 2.2},
            {"utterance": "table", "start_time": 2.2, "end_time": 2.6}
        ],
        "traces": [[
            {"x": 100, "y": 100, "t": 0.1}, {"x": 110, "y": 105, "t": 0.5},
            {"x": 120, "y": 110, "t": 0.9}, {"x": 200, "y": 200, "t": 1.3},
            {"x": 300, "y": 300, "t": 1.7}, {"x": 310, "y": 310, "t": 2.0},
            {"x": 320, "y": 320, "t": 2.4}
        ]]
    }"#
    .replace('\n', " ");

    let record = parse_record(&line).expect("valid record");
    println!("image {}: {:?}", record.image_id, record.caption);
    for w in &record.warnings {
        println!("  warning: {w}");
    }

    let word_segments = segment_by_words(&record.trace, &record.timed_words);
    for (w, seg) in record.timed_words.iter().zip(&word_segments) {
        println!(
            "  word {:8} [{:.1}, {:.1}] -> {} points",
            format!("{:?}", w.text),
            seg.t_start,
            seg.t_end,
            seg.points.len()
        );
    }

    let words: Vec<String> = record.timed_words.iter().map(|w| w.text.clone()).collect();
    let spans: Vec<PhraseSpan> = heuristic_phrase_spans(&words)
        .into_iter()
        .map(|(s, e)| PhraseSpan::new(s, e, heuristic_score(&words[s..e].join(" "))))
        .collect();
    let aligned = merge_to_phrases(&word_segments, &spans, DEFAULT_EPS_BASE).expect("spans tile");
    for (span, seg) in spans.iter().zip(&aligned) {
        println!(
            "  phrase {:?} importance {} -> weight {:.1}, tolerance {:.2}px, {} points",
            words[span.start..span.end].join(" "),
            span.importance,
            seg.weight,
            seg.tolerance,
            seg.points.len()
        );
    }
}
