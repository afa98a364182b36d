//! Prints the exact prompt the pipeline would send for one instance.
//!
//! Usage:
//!   render_prompt <conversations.jsonl> <conversation_id> <turn_index> <shot_count> [example_pool.jsonl]
//!
//! Without a pool file the built-in example pool is used. Selection is
//! first-k, the history budget is the default 4000 characters.

use std::path::Path;
use std::process::ExitCode;

use cqr_core::corpus::{load_conversations, make_instances, ConversationFormat};
use cqr_core::prompt::{
    build_prompt, default_example_pool, load_example_pool, PromptSpec, SelectionStrategy,
};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 5 || args.len() > 6 {
        eprintln!(
            "usage: {} <conversations.jsonl> <conversation_id> <turn_index> <shot_count> [example_pool.jsonl]",
            args[0]
        );
        return ExitCode::from(2);
    }
    let conversations = match load_conversations(Path::new(&args[1]), ConversationFormat::Canonical)
    {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let turn_index: usize = match args[3].parse() {
        Ok(t) => t,
        Err(_) => {
            eprintln!("error: turn_index must be a positive integer");
            return ExitCode::from(2);
        }
    };
    let shot_count: usize = match args[4].parse() {
        Ok(k) => k,
        Err(_) => {
            eprintln!("error: shot_count must be a non-negative integer");
            return ExitCode::from(2);
        }
    };
    let pool = match args.get(5) {
        Some(path) => match load_example_pool(Path::new(path)) {
            Ok(p) => p,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => default_example_pool(),
    };
    let instance = conversations
        .iter()
        .filter(|c| c.id == args[2])
        .flat_map(|c| make_instances(c))
        .find(|i| i.turn_index == turn_index);
    let instance = match instance {
        Some(i) => i,
        None => {
            eprintln!("error: no instance {}_{turn_index}", args[2]);
            return ExitCode::from(2);
        }
    };
    let mut spec = PromptSpec::with_defaults(shot_count, SelectionStrategy::FirstK, 42);
    spec.example_pool = pool;
    match build_prompt(&spec, &instance) {
        Ok(prompt) => {
            print!("{}", prompt.text);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
