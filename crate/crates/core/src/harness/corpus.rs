use rand::Rng;
use serde::{Deserialize, Serialize};

/// Generator for a two-topic toy corpus.
///
/// Each topic owns several themes of content words; a sentence picks one
/// theme and mixes its words with shared function words. A span hidden from
/// a sentence is therefore predictable from the theme words that remain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopicCorpus {
    pub topics: usize,
    pub themes_per_topic: usize,
    pub words_per_theme: usize,
    pub function_words: usize,
    /// Probability that a position holds a theme word.
    pub content_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for TopicCorpus {
    fn default() -> Self {
        // 2·20·4 content + 24 function words + 5 specials = 189 types
        Self {
            topics: 2,
            themes_per_topic: 20,
            words_per_theme: 4,
            function_words: 24,
            content_prob: 0.9,
            min_len: 8,
            max_len: 14,
        }
    }
}

impl TopicCorpus {
    pub fn word(topic: usize, theme: usize, w: usize) -> String {
        format!("{}{theme}w{w}", (b'a' + topic as u8) as char)
    }

    pub fn function_word(i: usize) -> String {
        format!("f{i}")
    }

    /// `(topic, theme)` of every generated sentence is returned alongside it.
    pub fn generate_labeled<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Vec<((usize, usize), Vec<String>)> {
        (0..n)
            .map(|_| {
                let topic = rng.random_range(0..self.topics);
                let theme = rng.random_range(0..self.themes_per_topic);
                let len = rng.random_range(self.min_len..=self.max_len);
                let words = (0..len)
                    .map(|_| {
                        if rng.random_bool(self.content_prob) {
                            Self::word(topic, theme, rng.random_range(0..self.words_per_theme))
                        } else {
                            Self::function_word(rng.random_range(0..self.function_words))
                        }
                    })
                    .collect();
                ((topic, theme), words)
            })
            .collect()
    }

    pub fn generate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<String>> {
        self.generate_labeled(n, rng).into_iter().map(|(_, s)| s).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Vocabulary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vocabulary_size_and_lengths() {
        let c = TopicCorpus::default();
        let s = c.generate(2000, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(s.iter().all(|x| (8..=14).contains(&x.len())));
        let v = Vocabulary::build(s.iter().flatten(), 1).unwrap();
        assert!((180..=200).contains(&v.len()), "{}", v.len());
    }

    #[test]
    fn sentences_stay_on_theme() {
        let c = TopicCorpus::default();
        for ((topic, theme), s) in c.generate_labeled(50, &mut ChaCha8Rng::seed_from_u64(2)) {
            let prefix = format!("{}{theme}w", (b'a' + topic as u8) as char);
            assert!(s.iter().all(|w| w.starts_with('f') || w.starts_with(&prefix)));
        }
    }
}
