use std::collections::HashMap;
use std::sync::OnceLock;

use super::WorldError;

/// Vocabulary id.
pub type Token = u16;
/// A sequence of vocabulary ids.
pub type TokenSeq = Vec<Token>;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const ACT: Token = 2;
pub const EOS: Token = 3;

pub const MAX_LOCATIONS: usize = 8;
pub const MAX_OBJECTS: usize = 6;
pub const MAX_RECEPTACLES: usize = 4;

pub(crate) const LOCATION_NAMES: [&str; MAX_LOCATIONS] =
    ["loc0", "loc1", "loc2", "loc3", "loc4", "loc5", "loc6", "loc7"];
pub(crate) const OBJECT_NAMES: [&str; MAX_OBJECTS] = ["mug", "apple", "book", "pen", "cup", "key"];
pub(crate) const RECEPTACLE_NAMES: [&str; MAX_RECEPTACLES] = ["cabinet", "shelf", "drawer", "table"];

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<act>", "<eos>"];
const WORDS: [&str; 21] = [
    "sink", "lamp", "go", "take", "put", "clean", "examine", "look", "adm", "sep", "scene",
    "task", "hold", "at", "none", "need", "next", "dirty", "washed", "pick", "pick2",
];

/// Ordered token alphabet of the text world.
///
/// Ids are dense; the four specials occupy ids 0..4.
#[derive(Debug, Clone)]
pub struct Lexicon {
    tokens: Vec<&'static str>,
    index: HashMap<&'static str, Token>,
}

impl Lexicon {
    /// The shared lexicon every world and policy uses.
    pub fn standard() -> &'static Lexicon {
        static LEXICON: OnceLock<Lexicon> = OnceLock::new();
        LEXICON.get_or_init(|| {
            let tokens: Vec<&'static str> = SPECIALS
                .iter()
                .chain(LOCATION_NAMES.iter())
                .chain(OBJECT_NAMES.iter())
                .chain(RECEPTACLE_NAMES.iter())
                .chain(WORDS.iter())
                .copied()
                .collect();
            let index = tokens
                .iter()
                .enumerate()
                .map(|(i, t)| (*t, i as Token))
                .collect::<HashMap<_, _>>();
            assert_eq!(index.len(), tokens.len(), "duplicate token in lexicon");
            Lexicon { tokens, index }
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<Token> {
        self.index.get(word).copied()
    }

    /// Id of a word known to be in the lexicon.
    pub(crate) fn word(&self, word: &str) -> Token {
        self.index[word]
    }

    pub fn text(&self, token: Token) -> Option<&'static str> {
        self.tokens.get(token as usize).copied()
    }

    pub fn encode(&self, text: &str) -> Result<TokenSeq, WorldError> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| WorldError::UnknownToken(w.to_string())))
            .collect()
    }

    pub fn decode(&self, tokens: &[Token]) -> String {
        tokens
            .iter()
            .map(|&t| self.text(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn location(&self, loc: usize) -> Token {
        self.word(LOCATION_NAMES[loc])
    }

    pub fn object(&self, obj: usize) -> Token {
        self.word(OBJECT_NAMES[obj])
    }

    pub fn receptacle(&self, rec: usize) -> Token {
        self.word(RECEPTACLE_NAMES[rec])
    }

    /// Inverse of [`Lexicon::location`].
    pub fn as_location(&self, token: Token) -> Option<usize> {
        let first = self.location(0);
        (token >= first && ((token - first) as usize) < MAX_LOCATIONS).then(|| (token - first) as usize)
    }

    pub fn as_object(&self, token: Token) -> Option<usize> {
        let first = self.object(0);
        (token >= first && ((token - first) as usize) < MAX_OBJECTS).then(|| (token - first) as usize)
    }

    pub fn as_receptacle(&self, token: Token) -> Option<usize> {
        let first = self.receptacle(0);
        (token >= first && ((token - first) as usize) < MAX_RECEPTACLES)
            .then(|| (token - first) as usize)
    }
}
