//! Split a referring expression into phrases, score each with the offline
//! heuristic, and show the resulting simplification tolerances.

use tracekit::weights::{
    heuristic_phrase_spans, heuristic_score, tolerance_of, weight_of, DEFAULT_EPS_BASE,
    SCORER_PROMPT,
};

fn main() {
    println!("scorer prompt:\n  {SCORER_PROMPT}\n");

    let caption = "the woman in the red jacket standing near the leftmost bicycle";
    let words: Vec<String> = caption.split(' ').map(String::from).collect();

    println!("caption: {caption:?}");
    for (start, end) in heuristic_phrase_spans(&words) {
        let phrase = words[start..end].join(" ");
        let score = heuristic_score(&phrase);
        let weight = weight_of(score).unwrap();
        let tolerance = tolerance_of(weight, DEFAULT_EPS_BASE);
        println!(
            "  {phrase:<28} score {score}  weight {weight:.1}  tolerance {tolerance:>5.2}px"
        );
    }

    // the full score-to-tolerance table at the default base tolerance
    println!("\nscore -> tolerance (eps_base = {DEFAULT_EPS_BASE}):");
    for score in 1u8..=5 {
        let weight = weight_of(score).unwrap();
        println!(
            "  {score} -> {:.4}px",
            tolerance_of(weight, DEFAULT_EPS_BASE)
        );
    }
}
