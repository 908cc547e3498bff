//! Deterministic template-generated support dialogues for tests, examples
//! and desk-scale runs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dialogue, Strategy, Turn};

const TOPICS: [&str; 8] = ["job", "exams", "family", "friend", "partner", "health", "money", "sleep"];
const FEELINGS: [&str; 6] = ["sad", "anxious", "lonely", "stressed", "angry", "hopeless"];

fn seeker_line(rng: &mut ChaCha8Rng, topic: &str) -> String {
    let feeling = FEELINGS[rng.gen_range(0..FEELINGS.len())];
    match rng.gen_range(0..4) {
        0 => format!("i feel {feeling} about my {topic} ."),
        1 => format!("my {topic} has been making me {feeling} lately ."),
        2 => format!("i do not know what to do about my {topic} , i am {feeling} ."),
        _ => format!("everything with my {topic} leaves me {feeling} ."),
    }
}

/// A response whose wording is fixed by the strategy and topic.
pub fn supporter_line(strategy: Strategy, topic: &str) -> String {
    match strategy {
        Strategy::Question => format!("what happened with your {topic} recently ?"),
        Strategy::RestatementOrParaphrasing => {
            format!("so your {topic} is weighing on you right now .")
        }
        Strategy::ReflectionOfFeelings => {
            format!("it sounds like your {topic} makes you feel really hurt .")
        }
        Strategy::SelfDisclosure => format!("i went through trouble with my {topic} too ."),
        Strategy::AffirmationAndReassurance => {
            format!("you are handling your {topic} better than you think .")
        }
        Strategy::ProvidingSuggestions => {
            format!("maybe write down one small step for your {topic} today .")
        }
        Strategy::Information => {
            format!("many people find their {topic} gets easier with support .")
        }
        Strategy::Others => format!("thank you for telling me about your {topic} ."),
    }
}

/// `n` dialogues, each alternating seeker and supporter for `exchanges`
/// rounds.
pub fn synthetic_corpus(n: usize, exchanges: usize, seed: u64) -> Vec<Dialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let topic = *TOPICS.choose(&mut rng).expect("non-empty");
            let mut turns = Vec::with_capacity(2 * exchanges);
            for _ in 0..exchanges {
                turns.push(Turn::seeker(seeker_line(&mut rng, topic)));
                let strategy = *Strategy::ALL.choose(&mut rng).expect("non-empty");
                turns.push(Turn::supporter(strategy, supporter_line(strategy, topic)));
            }
            Dialogue {
                id: format!("syn-{i:04}"),
                persona: format!("i worry about my {topic} ."),
                situation: format!("trouble with {topic}"),
                turns,
            }
        })
        .collect()
}

/// Eight single-exchange dialogues, one per strategy, each with a distinct
/// post and response.
pub fn overfit_corpus() -> Vec<Dialogue> {
    Strategy::ALL
        .iter()
        .zip(TOPICS)
        .enumerate()
        .map(|(i, (&strategy, topic))| Dialogue {
            id: format!("fit-{i}"),
            persona: String::new(),
            situation: topic.to_string(),
            turns: vec![
                Turn::seeker(format!("i feel {} about my {topic} .", FEELINGS[i % FEELINGS.len()])),
                Turn::supporter(strategy, supporter_line(strategy, topic)),
            ],
        })
        .collect()
}

/// Two dialogues held out from [`overfit_corpus`] for checkpoint selection.
pub fn overfit_validation() -> Vec<Dialogue> {
    [(Strategy::Question, "health"), (Strategy::Information, "job")]
        .iter()
        .enumerate()
        .map(|(i, &(strategy, topic))| Dialogue {
            id: format!("fit-valid-{i}"),
            persona: String::new(),
            situation: topic.to_string(),
            turns: vec![
                Turn::seeker(format!("lately my {topic} makes me stressed .")),
                Turn::supporter(strategy, supporter_line(strategy, topic)),
            ],
        })
        .collect()
}
