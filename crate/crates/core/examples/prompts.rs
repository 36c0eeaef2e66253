//! Renders a prompt, parses it back and maps it to vocabulary ids.

use urbanmind::tokens::{build_prompt, lex, parse_prompt, PromptContext, Vocabulary};

fn main() -> urbanmind::Result<()> {
    let channels = vec!["speed".to_string(), "inflow".to_string()];
    let ctx = PromptContext {
        city: "xian".into(),
        top_left: (10, 5),
        side: 10,
        prior_hours: (1..=8).collect(),
        target_hours: (9..=12).collect(),
        task: "speed".into(),
    };
    ctx.validate(&channels)?;
    let text = build_prompt(&ctx);
    println!("{text}");
    println!("{} lexemes", lex(&text).len());
    assert_eq!(parse_prompt(&text)?, ctx);

    let vocab = Vocabulary::for_data("xian", &channels);
    let ids = vocab.tokenize(&text);
    println!("vocabulary of {} words; ids {:?}", vocab.len(), &ids[..12]);
    let words: Vec<&str> = ids.iter().map(|&i| vocab.word(i)).collect();
    println!("decoded: {}", words.join(" "));
    Ok(())
}
