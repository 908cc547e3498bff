//! Generates the four relation-specific cognitive state sets for a post
//! and shows how they are cached in a precomputed-state file.
//!
//! cargo run --example cognition -- "my boss keeps yelling at me about deadlines"

use esc_fusion::cognition::{generate_states, CognitiveStateProvider, FileProvider, TemplateProvider};

fn main() -> esc_fusion::Result<()> {
    let post = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "my boss keeps yelling at me about deadlines".into());
    let provider = TemplateProvider;
    println!("keywords: {:?}", TemplateProvider::keywords(&post, 3));
    let bundle = generate_states(&provider, &post)?;
    for relation in bundle.relations() {
        println!("{}:", relation.name());
        for state in bundle.states(relation) {
            println!("  {state}");
        }
    }

    let mut file = FileProvider::default();
    file.insert(&post, bundle.clone());
    let reloaded = FileProvider::from_json(&file.to_json())?;
    assert_eq!(reloaded.generate(&post)?, bundle);
    println!("cached bundle round-trips through JSON");
    Ok(())
}
