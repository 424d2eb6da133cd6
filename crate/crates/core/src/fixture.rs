//! Deterministic counterfactual fixture datasets in the five-metric layout.
//!
//! Edit prompts are role strings (`The <role> <prep> <organization>`), targets come
//! from a fixed pool of names. Each edit carries one synonym paraphrase of its role;
//! the other two kgemap forms (possessive and a second synonym) are held out, so a
//! rule-based router is expected to get about a third of kgemap prompts right.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::sync::Arc;

use crate::dataset::{Dataset, Entry, EvalPrompt, FactEdit, MetricKind, SCHEMA_VERSION};
use crate::editor::PromptEditor;
use crate::embedding::{EditMemory, HashEmbedder};
use crate::error::{Error, Result};

struct Category {
    role: &'static str,
    prep: &'static str,
    synonym: &'static str,
    alt_synonym: &'static str,
    orgs: [&'static str; 10],
    specificity: [&'static str; 3],
}

const CATEGORIES: [Category; 10] = [
    Category {
        role: "CEO",
        prep: "of",
        synonym: "chief executive",
        alt_synonym: "top executive",
        orgs: [
            "Tesla",
            "Microsoft",
            "IBM",
            "Amazon",
            "Netflix",
            "Nvidia",
            "Intel",
            "Oracle",
            "Adobe",
            "Spotify",
        ],
        specificity: ["the logo of {}", "the headquarters of {}", "a product made by {}"],
    },
    Category {
        role: "president",
        prep: "of",
        synonym: "leader",
        alt_synonym: "head of state",
        orgs: [
            "France",
            "Brazil",
            "Mexico",
            "Kenya",
            "Argentina",
            "Chile",
            "Egypt",
            "Ghana",
            "Peru",
            "Finland",
        ],
        specificity: ["the flag of {}", "the currency of {}", "a map of {}"],
    },
    Category {
        role: "lead singer",
        prep: "of",
        synonym: "frontman",
        alt_synonym: "vocalist",
        orgs: [
            "Nightwish",
            "Coldplay",
            "Muse",
            "Radiohead",
            "Metallica",
            "Maroon 5",
            "Queen",
            "Oasis",
            "Blur",
            "Keane",
        ],
        specificity: ["an album cover by {}", "a concert poster for {}", "the band logo of {}"],
    },
    Category {
        role: "head coach",
        prep: "of",
        synonym: "manager",
        alt_synonym: "coach",
        orgs: [
            "Inter Miami",
            "Real Madrid",
            "Bayern Munich",
            "Juventus",
            "Ajax",
            "Benfica",
            "Celtic",
            "Porto",
            "Napoli",
            "Arsenal",
        ],
        specificity: ["the stadium of {}", "the jersey of {}", "the crest of {}"],
    },
    Category {
        role: "chief scientist",
        prep: "at",
        synonym: "lead researcher",
        alt_synonym: "top scientist",
        orgs: [
            "NASA",
            "CERN",
            "ESA",
            "NOAA",
            "DeepMind",
            "Bell Labs",
            "JAXA",
            "ISRO",
            "Fermilab",
            "EMBL",
        ],
        specificity: ["the emblem of {}", "a laboratory of {}", "a research poster from {}"],
    },
    Category {
        role: "mayor",
        prep: "of",
        synonym: "first citizen",
        alt_synonym: "municipal leader",
        orgs: [
            "Paris", "Tokyo", "Berlin", "Madrid", "Rome", "Vienna", "Oslo", "Dublin", "Lisbon", "Prague",
        ],
        specificity: ["the skyline of {}", "a street in {}", "the city hall of {}"],
    },
    Category {
        role: "founder",
        prep: "of",
        synonym: "creator",
        alt_synonym: "originator",
        orgs: [
            "Airbnb",
            "Uber",
            "Dropbox",
            "Reddit",
            "Pinterest",
            "Stripe",
            "Shopify",
            "Zoom",
            "Slack",
            "Etsy",
        ],
        specificity: ["the app icon of {}", "the office of {}", "a billboard for {}"],
    },
    Category {
        role: "director",
        prep: "of",
        synonym: "head curator",
        alt_synonym: "chief administrator",
        orgs: [
            "Louvre",
            "Prado",
            "Uffizi",
            "Hermitage",
            "Rijksmuseum",
            "Guggenheim",
            "Tate Modern",
            "Smithsonian",
            "Getty Center",
            "MoMA",
        ],
        specificity: ["the entrance of {}", "a painting in {}", "a ticket for {}"],
    },
    Category {
        role: "prime minister",
        prep: "of",
        synonym: "premier",
        alt_synonym: "head of government",
        orgs: [
            "Canada", "Japan", "India", "Italy", "Spain", "Sweden", "Norway", "Greece", "Poland", "Ireland",
        ],
        specificity: [
            "the parliament building of {}",
            "a banknote of {}",
            "a postage stamp of {}",
        ],
    },
    Category {
        role: "chairman",
        prep: "of",
        synonym: "board chair",
        alt_synonym: "chairperson",
        orgs: [
            "HSBC",
            "Barclays",
            "Citigroup",
            "UBS",
            "Santander",
            "Nomura",
            "BNP Paribas",
            "Rabobank",
            "Nordea",
            "ING",
        ],
        specificity: ["a branch of {}", "a credit card from {}", "the tower of {}"],
    },
];

const NAMES: [&str; 20] = [
    "Tim Cook",
    "Jeff Bezos",
    "Joe Biden",
    "Elvis Presley",
    "David Beckham",
    "Boris Johnson",
    "Taylor Swift",
    "Lionel Messi",
    "Oprah Winfrey",
    "Barack Obama",
    "Serena Williams",
    "Bill Gates",
    "Rihanna",
    "Keanu Reeves",
    "Angela Merkel",
    "Usain Bolt",
    "Emma Watson",
    "Kanye West",
    "Kylian Mbappe",
    "Lady Gaga",
];

const QUALIFIERS: [&str; 5] = ["deputy", "former", "acting", "honorary", "interim"];

const GENERALITY: [&str; 5] = [
    "in a meeting",
    "eating an apple",
    "reading a book",
    "riding a bicycle",
    "giving a speech",
];
const KGEMAP: [&str; 3] = ["running in the streets", "eating strawberries", "waving to a crowd"];
const COMPO: [&str; 3] = [
    "hiking in the mountains",
    "having a casual conversation in a coffee shop",
    "playing chess in a park",
];

struct Role {
    edit_prompt: String,
    paraphrase: String,
    possessive: String,
    alt_paraphrase: String,
    specificity: Vec<String>,
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn lower_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn make_role(cat: &Category, org: &str, round: usize) -> Role {
    let qual = match round {
        0 => String::new(),
        r if r <= QUALIFIERS.len() => format!("{} ", QUALIFIERS[r - 1]),
        r => format!("{}th {} ", r + 1, QUALIFIERS[(r - 1) % QUALIFIERS.len()]),
    };
    Role {
        edit_prompt: format!("The {qual}{} {} {org}", cat.role, cat.prep),
        paraphrase: format!("The {qual}{} {} {org}", cat.synonym, cat.prep),
        possessive: format!("{}'s {qual}{}", capitalize(org), cat.role),
        alt_paraphrase: format!("The {qual}{} {} {org}", cat.alt_synonym, cat.prep),
        specificity: cat.specificity.iter().map(|t| t.replace("{}", org)).collect(),
    }
}

/// `num` roles, then the unused base roles in draw order.
fn roles(num: usize, rng: &mut ChaCha8Rng) -> (Vec<Role>, Vec<Role>) {
    let mut base: Vec<(usize, usize)> = (0..CATEGORIES.len())
        .flat_map(|c| (0..CATEGORIES[c].orgs.len()).map(move |o| (c, o)))
        .collect();
    base.shuffle(rng);
    let used = (0..num)
        .map(|i| {
            let (c, o) = base[i % base.len()];
            make_role(&CATEGORIES[c], CATEGORIES[c].orgs[o], i / base.len())
        })
        .collect();
    let spare = base
        .iter()
        .skip(num)
        .rev()
        .map(|&(c, o)| make_role(&CATEGORIES[c], CATEGORIES[c].orgs[o], 0))
        .collect();
    (used, spare)
}

/// Target names assigned in shuffled rounds of the pool, so every run of 20
/// consecutive entries has distinct targets.
fn targets(num: usize, rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    let mut out = Vec::with_capacity(num);
    while out.len() < num {
        let mut round = NAMES.to_vec();
        round.shuffle(rng);
        out.extend(round);
    }
    out.truncate(num);
    out
}

/// Entries whose prompts the rule-based editor does not rewrite to their target
/// text when every edit of the dataset is in memory. Kgemap prompts are not
/// checked.
fn misrouted(dataset: &Dataset) -> Result<Vec<usize>> {
    let mut memory = EditMemory::new(Arc::new(HashEmbedder::default()));
    for e in &dataset.entries {
        for edit in std::iter::once(&e.edit1).chain(&e.edit2) {
            if memory.get(&edit.id).is_none() {
                memory.insert(edit.clone())?;
            }
        }
    }
    let editor = PromptEditor::rule_based();
    let mut bad = Vec::new();
    for (i, e) in dataset.entries.iter().enumerate() {
        for p in e.prompts.iter().filter(|p| p.kind != MetricKind::KgeMap) {
            if editor.run(&memory, &p.edit_text)?.0 != p.target_text {
                bad.push(i);
                break;
            }
        }
    }
    Ok(bad)
}

fn assemble(num_entries: usize, seed: u64, roles: &[Role], targets: &[&str]) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(17) ^ 0x5eed);
    let edits: Vec<FactEdit> = (0..num_entries)
        .map(|i| {
            FactEdit::new(format!("e{i:03}/edit1"), &roles[i].edit_prompt, targets[i])
                .with_paraphrases(vec![roles[i].paraphrase.clone()])
        })
        .collect();

    let mut entries = Vec::with_capacity(num_entries);
    for i in 0..num_entries {
        let edit1 = edits[i].clone();
        let role = &roles[i];
        let donors: Vec<usize> = (0..num_entries)
            .filter(|&j| j != i && edits[j].target_prompt != edit1.target_prompt)
            .collect();
        let (edit2, edit2_role) = match donors.choose(&mut rng) {
            Some(&j) => (edits[j].clone(), &roles[j]),
            None => {
                let spare = &roles[num_entries];
                let target = NAMES
                    .iter()
                    .copied()
                    .filter(|n| *n != edit1.target_prompt)
                    .nth(rng.gen_range(0..NAMES.len() - 1))
                    .expect("pool has another name");
                let edit = FactEdit::new(format!("e{i:03}/edit2"), &spare.edit_prompt, target)
                    .with_paraphrases(vec![spare.paraphrase.clone()]);
                (edit, spare)
            }
        };

        let name = &edit1.target_prompt;
        let mut prompts = vec![EvalPrompt::new(MetricKind::Efficacy, &role.edit_prompt, name)];
        prompts.extend(GENERALITY.iter().map(|s| {
            EvalPrompt::new(
                MetricKind::Generality,
                format!("{} {s}", role.edit_prompt),
                format!("{name} {s}"),
            )
        }));
        prompts.extend(
            role.specificity
                .iter()
                .map(|s| EvalPrompt::new(MetricKind::Specificity, s, s)),
        );
        let forms = [&role.paraphrase, &role.possessive, &role.alt_paraphrase];
        prompts.extend(
            forms
                .iter()
                .zip(KGEMAP)
                .map(|(form, s)| EvalPrompt::new(MetricKind::KgeMap, format!("{form} {s}"), format!("{name} {s}"))),
        );
        prompts.extend(COMPO.iter().map(|s| {
            EvalPrompt::new(
                MetricKind::Compo,
                format!("{} and {} {s}", role.edit_prompt, lower_first(&edit2_role.edit_prompt)),
                format!("{name} and {} {s}", edit2.target_prompt),
            )
        }));

        entries.push(Entry {
            id: format!("e{i:03}"),
            edit1,
            edit2: Some(edit2),
            prompts,
        });
    }

    Dataset {
        name: format!("cake-fixture-{num_entries}-{seed}"),
        schema_version: SCHEMA_VERSION,
        entries,
    }
}

/// Builds a fixture dataset of `num_entries` entries. Same inputs, same dataset.
///
/// Roles are redrawn from the unused pool until the built-in embedder and the
/// rule-based editor route every checked prompt to its own edits, so small
/// fixtures score exactly under MPE. Large fixtures may exhaust the pool first.
pub fn generate_fixture_dataset(num_entries: usize, seed: u64) -> Result<Dataset> {
    if num_entries == 0 {
        return Err(Error::InvalidInput("num_entries must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // One extra role backs Edit II when no other entry can donate one.
    let (mut roles, mut pool) = roles(num_entries + 1, &mut rng);
    let targets = targets(num_entries, &mut rng);
    loop {
        let dataset = assemble(num_entries, seed, &roles, &targets);
        let bad = misrouted(&dataset)?;
        if bad.is_empty() || pool.len() < bad.len() {
            if !bad.is_empty() {
                log::debug!("fixture keeps {} misrouted entries", bad.len());
            }
            dataset.validate()?;
            return Ok(dataset);
        }
        for i in bad {
            roles[i] = pool.pop().expect("pool checked above");
        }
    }
}
