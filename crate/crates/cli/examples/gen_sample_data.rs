//! Regenerates the bundled sample dataset under ./sample/data.
//!
//! Usage: cargo run -p finsent-cli --example gen_sample_data

use std::fs;
use std::path::Path;

use finsent_core::synth;

fn main() -> std::io::Result<()> {
    let data = Path::new("sample/data");
    fs::create_dir_all(data.join("corpus"))?;

    let mut phrasebank = String::new();
    for r in synth::sentiment_dataset(120, 20240601) {
        phrasebank.push_str(&format!(
            "{}@{}@{}\n",
            r.text,
            r.label,
            r.agreement.percent()
        ));
    }
    fs::write(data.join("phrasebank.txt"), phrasebank)?;

    for doc in synth::domain_documents(8, 12, 20240602) {
        fs::write(
            data.join("corpus").join(&doc.name),
            doc.sentences.join("\n"),
        )?;
    }

    fs::write(
        data.join("keywords.txt"),
        "profit\nrevenue\nsales\nearnings\nguidance\nmargins\n",
    )?;

    let mut entries = Vec::new();
    for r in synth::regression_dataset(40, 20240603) {
        entries.push(format!(
            r#"  {{"text": {}, "score": {:.3}, "target": {}}}"#,
            serde_json::to_string(&r.text).unwrap(),
            r.score,
            serde_json::to_string(&r.target_entity).unwrap()
        ));
    }
    fs::write(
        data.join("fiqa.json"),
        format!("[\n{}\n]\n", entries.join(",\n")),
    )?;

    println!("sample data written under {}", data.display());
    Ok(())
}
