//! Few-shot prompt assembly and VQA scoring, without a trained model.
//!
//! Shows the prompt structure for 0, 1, and 2 shots — image slots
//! interleaved with `Q:`/`A:` text — and the consensus accuracy metric,
//! using a scripted responder in place of a model so the mechanics stand
//! out. Run with:
//!
//! ```text
//! cargo run --example few_shot_vqa
//! ```

use vlad::eval::{
    assemble_prompt, evaluate_vqa, normalize_answer, select_shots, vqa_accuracy, FewShotSpec,
    PromptPiece, QAExample,
};

fn main() -> vlad::Result<()> {
    let items: Vec<QAExample> = (0..6)
        .map(|i| QAExample {
            id: format!("item-{i}"),
            image: format!("scene_{i}.ppm"),
            question: format!("what color is object {i}?"),
            ground_truths: vec!["red".into(); 10],
        })
        .collect();

    // Prompt structure for increasing shot counts.
    for n_shots in [0, 1, 2] {
        let spec = FewShotSpec { n_shots, seed: 9 };
        let shot_idx = select_shots(items.len(), 0, &spec);
        let shots: Vec<(&QAExample, String)> = shot_idx
            .iter()
            .map(|&i| (&items[i], "red".to_string()))
            .collect();
        let plan = assemble_prompt(&shots, &items[0]);
        println!("--- {n_shots}-shot prompt ({} image slots) ---", plan.image_count());
        for piece in &plan.pieces {
            match piece {
                PromptPiece::Image(path) => println!("[image: {path}]"),
                PromptPiece::Text(text) => print!("{text}"),
            }
        }
        println!("\n");
    }

    // The consensus metric: credit grows with agreeing annotators. Two of
    // ten said "red", so "red" earns partial credit; eight said "blue", so
    // "blue" earns full credit.
    println!("--- consensus accuracy ---");
    let truths: Vec<String> = ["red"; 2]
        .iter()
        .chain(["blue"; 8].iter())
        .map(|s| s.to_string())
        .collect();
    for answer in ["red", "blue", "green"] {
        println!(
            "answer {answer:>5} against 2x red + 8x blue -> {:.2}",
            vqa_accuracy(answer, &truths)
        );
    }

    // Normalization: articles drop, number words become digits.
    for raw in ["The Red Square", "a dog and two cats", "it's seven!"] {
        println!("normalize({raw:?}) = {:?}", normalize_answer(raw));
    }

    // A full evaluation pass with a scripted responder standing in for the
    // model: it answers the first half correctly and the rest wrong.
    let spec = FewShotSpec { n_shots: 2, seed: 9 };
    let mut calls = 0;
    let (summary, _records) = evaluate_vqa(&items, &spec, None, |_plan| {
        calls += 1;
        Ok(if calls <= 3 { "red".into() } else { "wrong".into() })
    })?;
    println!("\nscripted responder: {summary:?}");
    assert!((summary.mean_accuracy - 0.5).abs() < 1e-12);
    Ok(())
}
