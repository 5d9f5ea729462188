//! Deterministic synthetic corpus: short English documents about a small
//! fixed world, with genre, topic, sentiment and keyword attributes and
//! knowledge triples for the relational sentences.

use rand::seq::SliceRandom;
use rand::Rng;
use titan_core::rng::{derive_seed, rng_from_seed, SeededRng};
use titan_core::tasks::{AttributeSet, Sentiment};
use titan_core::text::{Document, Triple};

const PEOPLE: [&str; 16] = [
    "Alice", "Bruno", "Chen", "Dara", "Elena", "Farid", "Grace", "Hugo", "Ines", "Jonas", "Kira", "Liam",
    "Mona", "Nikos", "Olga", "Pavel",
];
const CITIES: [&str; 10] = [
    "Paris", "Lagos", "Osaka", "Lima", "Oslo", "Cairo", "Quito", "Perth", "Turin", "Dublin",
];
const TEAMS: [&str; 8] = [
    "Rovers", "Falcons", "Tigers", "Comets", "Wolves", "Pilots", "Giants", "Sharks",
];
const COMPANIES: [&str; 8] = [
    "Norland", "Vexa", "Orbital", "Kestrel", "Mintra", "Solace", "Brightway", "Tanto",
];
const DAYS: [&str; 7] = ["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"];

pub const TOPICS: [&str; 5] = ["Sports", "Finance", "Weather", "Science", "Travel"];

/// Genre of each topic's documents.
pub const TOPIC_GENRE: [usize; 5] = [1, 0, 0, 2, 3];

const POSITIVE: [&str; 6] = ["good", "great", "excellent", "strong", "pleasant", "bright"];
const NEGATIVE: [&str; 6] = ["bad", "poor", "terrible", "weak", "unpleasant", "dark"];
const NEUTRAL: [&str; 4] = ["usual", "quiet", "plain", "average"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    /// Stops once the texts reach this many bytes.
    pub target_bytes: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            target_bytes: 5_000_000,
            min_sentences: 2,
            max_sentences: 8,
            seed: 0,
        }
    }
}

fn city_of(p: usize) -> usize {
    (p * 3 + 1) % CITIES.len()
}
fn team_of(p: usize) -> usize {
    (p * 5 + 2) % TEAMS.len()
}
fn company_of(p: usize) -> usize {
    (p * 7 + 3) % COMPANIES.len()
}
fn home_of_team(t: usize) -> usize {
    (t * 3 + 4) % CITIES.len()
}
fn home_of_company(c: usize) -> usize {
    (c * 7 + 5) % CITIES.len()
}

struct Builder<'r> {
    rng: &'r mut SeededRng,
    sentiment: Sentiment,
    triples: Vec<Triple>,
    mentions: Vec<&'static str>,
}

impl Builder<'_> {
    fn adj(&mut self) -> &'static str {
        let pool: &[&str] = match self.sentiment {
            Sentiment::Positive => &POSITIVE,
            Sentiment::Negative => &NEGATIVE,
            Sentiment::Neutral => &NEUTRAL,
        };
        pool.choose(self.rng).unwrap()
    }

    fn person(&mut self) -> usize {
        let p = self.rng.gen_range(0..PEOPLE.len());
        self.mentions.push(PEOPLE[p]);
        p
    }

    fn fact(&mut self, head: &str, relation: &str, tail: &str) -> String {
        self.triples.push(Triple {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        });
        format!("{head} {relation} {tail}.")
    }

    fn sentence(&mut self, topic: usize) -> String {
        let kind = self.rng.gen_range(0..5);
        match (topic, kind) {
            (0, 0) => {
                let p = self.person();
                self.fact(PEOPLE[p], "plays for", TEAMS[team_of(p)])
            }
            (0, 1) => {
                let t = self.rng.gen_range(0..TEAMS.len());
                self.mentions.push(TEAMS[t]);
                let verb = match self.sentiment {
                    Sentiment::Positive => "won",
                    Sentiment::Negative => "lost",
                    Sentiment::Neutral => "played",
                };
                let other = TEAMS[(t + 1 + self.rng.gen_range(0..TEAMS.len() - 1)) % TEAMS.len()];
                format!("The {} {verb} the match against the {other}.", TEAMS[t])
            }
            (0, 2) => {
                let p = self.person();
                let a = self.adj();
                format!("{} scored a {a} goal for the {}.", PEOPLE[p], TEAMS[team_of(p)])
            }
            (0, 3) => {
                let t = self.rng.gen_range(0..TEAMS.len());
                self.mentions.push(TEAMS[t]);
                self.fact(TEAMS[t], "is based in", CITIES[home_of_team(t)])
            }
            (0, _) => {
                let a = self.adj();
                format!("Fans called it a {a} season.")
            }
            (1, 0) => {
                let p = self.person();
                self.fact(PEOPLE[p], "works at", COMPANIES[company_of(p)])
            }
            (1, 1) => {
                let c = self.rng.gen_range(0..COMPANIES.len());
                self.mentions.push(COMPANIES[c]);
                let a = self.adj();
                format!("{} reported {a} results this quarter.", COMPANIES[c])
            }
            (1, 2) => {
                let c = self.rng.gen_range(0..COMPANIES.len());
                self.mentions.push(COMPANIES[c]);
                self.fact(COMPANIES[c], "is based in", CITIES[home_of_company(c)])
            }
            (1, 3) => {
                let c = self.rng.gen_range(0..COMPANIES.len());
                self.mentions.push(COMPANIES[c]);
                let verb = match self.sentiment {
                    Sentiment::Positive => "rose",
                    Sentiment::Negative => "fell",
                    Sentiment::Neutral => "held",
                };
                format!("Shares of {} {verb} on {}.", COMPANIES[c], DAYS.choose(self.rng).unwrap())
            }
            (1, _) => {
                let a = self.adj();
                format!("Analysts expect a {a} year.")
            }
            (2, 0) | (2, 1) => {
                let c = *CITIES.choose(self.rng).unwrap();
                self.mentions.push(c);
                let a = self.adj();
                format!("The weather in {c} was {a} on {}.", DAYS.choose(self.rng).unwrap())
            }
            (2, 2) => {
                let c = *CITIES.choose(self.rng).unwrap();
                self.mentions.push(c);
                format!("Rain is expected over {c} later this week.")
            }
            (2, 3) => {
                let a = self.adj();
                format!("The sky stayed {a} all day.")
            }
            (2, _) => {
                let c = *CITIES.choose(self.rng).unwrap();
                self.mentions.push(c);
                format!("Winds near {c} slowed in the evening.")
            }
            (3, 0) => {
                let p = self.person();
                self.fact(PEOPLE[p], "works at", COMPANIES[company_of(p)])
            }
            (3, 1) => {
                let p = self.person();
                let a = self.adj();
                format!("{} published a {a} study on {}.", PEOPLE[p], DAYS.choose(self.rng).unwrap())
            }
            (3, 2) => {
                let c = self.rng.gen_range(0..COMPANIES.len());
                self.mentions.push(COMPANIES[c]);
                let a = self.adj();
                format!("The lab at {} found a {a} result.", COMPANIES[c])
            }
            (3, 3) => {
                let a = self.adj();
                format!("The experiment gave {a} data.")
            }
            (3, _) => {
                let p = self.person();
                format!("{} repeated the test in {}.", PEOPLE[p], CITIES[city_of(p)])
            }
            (_, 0) | (_, 1) => {
                let p = self.person();
                self.fact(PEOPLE[p], "lives in", CITIES[city_of(p)])
            }
            (_, 2) => {
                let c = *CITIES.choose(self.rng).unwrap();
                self.mentions.push(c);
                let a = self.adj();
                format!("The trip to {c} was {a}.")
            }
            (_, 3) => {
                let p = self.person();
                let a = self.adj();
                format!("{} had a {a} stay in {}.", PEOPLE[p], CITIES[city_of(p)])
            }
            _ => {
                let a = self.adj();
                format!("Hotels in the old town were {a}.")
            }
        }
    }
}

/// Entity names of the synthetic world, for knowledge masking.
pub fn lexicon() -> Vec<&'static str> {
    PEOPLE.iter().chain(&CITIES).chain(&TEAMS).chain(&COMPANIES).copied().collect()
}

/// Generates documents `syn-000000`, `syn-000001`, ... Document `i` depends
/// only on `(seed, i)`.
pub fn synthetic_corpus(opts: &SynthOptions) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut bytes = 0;
    let mut i = 0u64;
    while bytes < opts.target_bytes {
        let d = synthetic_document(opts, i);
        bytes += d.text.len() + 1;
        docs.push(d);
        i += 1;
    }
    docs
}

pub fn synthetic_document(opts: &SynthOptions, i: u64) -> Document {
    let mut rng = rng_from_seed(derive_seed(opts.seed, i, 0));
    let topic = rng.gen_range(0..TOPICS.len());
    let sentiment = Sentiment::ALL[rng.gen_range(0..3)];
    let n = rng.gen_range(opts.min_sentences..=opts.max_sentences.max(opts.min_sentences));
    let mut b = Builder {
        rng: &mut rng,
        sentiment,
        triples: Vec::new(),
        mentions: Vec::new(),
    };
    let sentences: Vec<String> = (0..n).map(|_| b.sentence(topic)).collect();
    let mut keywords: Vec<String> = Vec::new();
    for m in &b.mentions {
        if !keywords.iter().any(|k| k == m) && keywords.len() < 3 {
            keywords.push((*m).to_string());
        }
    }
    let triples = std::mem::take(&mut b.triples);
    let mut d = Document::new(format!("syn-{i:06}"), sentences.join(" "));
    d.attributes = Some(AttributeSet {
        genre: Some(TOPIC_GENRE[topic]),
        topic: Some(TOPICS[topic].to_string()),
        keywords: (!keywords.is_empty()).then_some(keywords),
        sentiment: Some(sentiment),
        length: None,
    });
    d.triples = triples;
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let opts = SynthOptions {
            target_bytes: 20_000,
            ..Default::default()
        };
        let a = synthetic_corpus(&opts);
        assert_eq!(a, synthetic_corpus(&opts));
        let total: usize = a.iter().map(|d| d.text.len() + 1).sum();
        assert!(total >= 20_000 && total < 21_000);
        let other = synthetic_corpus(&SynthOptions { seed: 1, ..opts });
        assert_ne!(a[0], other[0]);
        for d in &a {
            let n = d.num_sentences();
            assert!((2..=8).contains(&n), "{}", d.text);
            for t in &d.triples {
                assert!(d.text.contains(&format!("{} {} {}.", t.head, t.relation, t.tail)));
            }
        }
        assert!(a.iter().any(|d| !d.triples.is_empty()));
    }

    #[test]
    fn facts_are_consistent() {
        let docs = synthetic_corpus(&SynthOptions {
            target_bytes: 50_000,
            ..Default::default()
        });
        let mut seen = std::collections::BTreeMap::new();
        for t in docs.iter().flat_map(|d| &d.triples) {
            let prev = seen.insert((t.head.clone(), t.relation.clone()), t.tail.clone());
            assert!(prev.is_none_or(|p| p == t.tail));
        }
    }
}
