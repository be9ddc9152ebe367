//! Score candidate sentences against references with corpus-level BLEU-4 and
//! ROUGE-L — the same scorers the evaluation pipeline applies to generated
//! explanations.

use gvrt::evalkit::{bleu4, caption_scores, rouge_l};

fn main() -> Result<(), gvrt::GvrtError> {
    let hypotheses: Vec<String> = [
        "a red circle on a plain background",
        "a small blue square sits in the corner",
        "three green triangles in a row",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();

    let references: Vec<Vec<String>> = vec![
        vec![
            "a red circle on a plain background".into(),
            "one large red circle".into(),
        ],
        vec!["a small blue square in the corner".into()],
        vec!["three green triangles arranged in a row".into()],
    ];

    let scores = caption_scores(&hypotheses, &references)?;
    println!("corpus BLEU-4:  {:.2}", scores.bleu4);
    println!("corpus ROUGE-L: {:.2}", scores.rouge_l);

    // A perfect corpus scores exactly 100 on both.
    let perfect = bleu4(&hypotheses, &hypotheses.iter().map(|h| vec![h.clone()]).collect::<Vec<_>>())?;
    assert_eq!(perfect, 100.0);
    let perfect = rouge_l(&hypotheses, &hypotheses.iter().map(|h| vec![h.clone()]).collect::<Vec<_>>())?;
    assert_eq!(perfect, 100.0);
    println!("identity corpus: both metrics exactly 100");

    // BLEU-4 needs a 4-gram match somewhere in the corpus to be nonzero.
    let short: Vec<String> = vec!["red circle".into()];
    let refs: Vec<Vec<String>> = vec![vec!["red circle".into()]];
    println!(
        "two-word identity corpus BLEU-4: {:.2} (no 4-grams exist)",
        bleu4(&short, &refs)?
    );
    println!("two-word identity corpus ROUGE-L: {:.2}", rouge_l(&short, &refs)?);
    Ok(())
}
