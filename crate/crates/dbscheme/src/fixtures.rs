//! Synthetic datasets with planted, independently checkable labelling rules.

use std::fs;
use std::path::Path;

use dbscheme_core::datetime::{civil, days_from_civil};
use dbscheme_core::relmodel::{AttributeDef, Database, ForeignKeyDef, RawType, RelationDef, SchemaDef, Table, Value};
use dbscheme_core::sampler::TaskKind;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, Error, Result};
use crate::ingest::write_dataset;
use crate::manifest::{Manifest, TargetSpec};

pub const RULE_FILE: &str = "rule.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum FixtureKind {
    /// Pairs of people labelled by whether both belong to the same generation,
    /// which is stored two joins away.
    Kinship,
    /// Stores whose target is a linear function of means over their sales.
    StarRegression,
    /// One table, label linearly separable with a margin.
    FlatTable,
    /// Events labelled by the weekday of a timestamp.
    Weekday,
    /// Tickets labelled by a keyword hidden in free text.
    Keyword,
}

impl FixtureKind {
    pub fn default_size(self) -> usize {
        match self {
            FixtureKind::Kinship => 1000,
            FixtureKind::StarRegression => 400,
            FixtureKind::FlatTable => 600,
            FixtureKind::Weekday => 600,
            FixtureKind::Keyword => 600,
        }
    }
}

/// The labelling rule of a fixture, written next to the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rule {
    /// `pair.same_gen = level(cohort(person(a_id))) == level(cohort(person(b_id)))`.
    Kinship { description: String, levels: usize },
    /// `store.revenue = intercept + amount_coef * mean(sale.amount) + discount_coef * mean(sale.discount)`
    /// over the sales of the store.
    StarRegression { description: String, intercept: f64, amount_coef: f64, discount_coef: f64 },
    /// `sample.label = [weights · (x1..x4) + color_offset[color] + bias > 0]`; rows with
    /// a score within `margin` of zero are never generated.
    FlatTable { description: String, weights: Vec<f64>, color_offset: Vec<(String, f64)>, bias: f64, margin: f64 },
    /// `event.label = [weekday(at) in weekdays]`, Monday = 0, UTC.
    Weekday { description: String, weekdays: Vec<u32> },
    /// `ticket.label` is the index of the keyword group whose member occurs in `body`.
    Keyword { description: String, groups: Vec<Vec<String>> },
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub manifest: Manifest,
    pub db: Database,
    pub rule: Rule,
}

fn a(name: &str, raw: RawType) -> AttributeDef {
    AttributeDef::new(name, raw)
}

fn relation(name: &str, attributes: Vec<AttributeDef>, fks: &[(&str, &str)]) -> RelationDef {
    RelationDef {
        name: name.into(),
        attributes,
        pk_attrs: vec!["id".into()],
        fks: fks.iter().map(|(c, t)| ForeignKeyDef { source_relation: name.into(), source_attrs: vec![(*c).into()], target_relation: (*t).into() }).collect(),
    }
}

fn int(i: usize) -> Value {
    Value::Integer(i as i64)
}

/// Rounds to 4 decimals so values survive any text round trip unchanged.
fn r4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Generates a fixture in memory. `size` is the number of target rows.
pub fn generate(kind: FixtureKind, size: usize, seed: u64) -> Result<Fixture> {
    if size < 10 {
        return Err(Error::Usage(format!("fixture size {size} is below 10")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (name, relations, tables, target, rule) = match kind {
        FixtureKind::Kinship => kinship(&mut rng, size),
        FixtureKind::StarRegression => star(&mut rng, size),
        FixtureKind::FlatTable => flat(&mut rng, size),
        FixtureKind::Weekday => weekday(&mut rng, size),
        FixtureKind::Keyword => keyword(&mut rng, size),
    };
    let tables: Vec<Table> = tables.into_iter().zip(&relations).map(|(rows, r)| Table::new(r.arity(), rows)).collect();
    let db = Database::new(SchemaDef { relations }, tables)?;
    let manifest = Manifest::describe(name, &db, Some(target));
    Ok(Fixture { manifest, db, rule })
}

/// Writes the fixture's CSV files, manifest and rule sidecar into `dir`.
pub fn make_fixture(kind: FixtureKind, size: usize, seed: u64, dir: &Path) -> Result<Fixture> {
    let fx = generate(kind, size, seed)?;
    write_dataset(dir, &fx.manifest, &fx.db)?;
    let path = dir.join(RULE_FILE);
    let mut text = serde_json::to_string_pretty(&fx.rule).map_err(json_err(&path))?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(fx)
}

pub fn read_rule(dir: &Path) -> Result<Rule> {
    let path = dir.join(RULE_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(json_err(&path))
}

type Parts = (&'static str, Vec<RelationDef>, Vec<Vec<Vec<Value>>>, TargetSpec, Rule);

fn target(relation: &str, attribute: &str, task: TaskKind) -> TargetSpec {
    TargetSpec { relation: relation.into(), attribute: attribute.into(), task }
}

fn kinship(rng: &mut ChaCha8Rng, n: usize) -> Parts {
    let levels = 4;
    let n_cohorts = (n / 25).max(2 * levels);
    let cohorts: Vec<Vec<Value>> = (0..n_cohorts).map(|c| vec![int(c), int(c % levels)]).collect();
    let eyes = ["amber", "blue", "brown", "green"];
    let mut by_level: Vec<Vec<usize>> = vec![Vec::new(); levels];
    let mut people = Vec::with_capacity(n);
    for p in 0..n {
        let c = rng.gen_range(0..n_cohorts);
        by_level[c % levels].push(p);
        people.push(vec![int(p), int(c), Value::Text(eyes[rng.gen_range(0..eyes.len())].into())]);
    }
    let level_of = |p: usize| match people[p][1] {
        Value::Integer(c) => c as usize % levels,
        _ => unreachable!(),
    };
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let pa = rng.gen_range(0..n);
        let same = i % 2 == 0;
        let pb = loop {
            let pb = if same { *by_level[level_of(pa)].choose(rng).expect("level has members") } else { rng.gen_range(0..n) };
            if pb != pa && (level_of(pb) == level_of(pa)) == same {
                break pb;
            }
        };
        pairs.push(vec![int(i), int(pa), int(pb), int(same as usize)]);
    }
    pairs.shuffle(rng);
    pairs.iter_mut().enumerate().for_each(|(i, r)| r[0] = int(i));
    let relations = vec![
        relation("cohort", vec![a("id", RawType::Integer), a("level", RawType::Integer)], &[]),
        relation("person", vec![a("id", RawType::Integer), a("cohort_id", RawType::Integer), a("eye", RawType::Text)], &[("cohort_id", "cohort")]),
        relation(
            "pair",
            vec![a("id", RawType::Integer), a("a_id", RawType::Integer), a("b_id", RawType::Integer), a("same_gen", RawType::Integer)],
            &[("a_id", "person"), ("b_id", "person")],
        ),
    ];
    let rule = Rule::Kinship {
        description: "pair.same_gen is 1 iff the cohorts of person a_id and person b_id have the same level".into(),
        levels,
    };
    ("kinship", relations, vec![cohorts, people, pairs], target("pair", "same_gen", TaskKind::Classification), rule)
}

fn star(rng: &mut ChaCha8Rng, n: usize) -> Parts {
    let (intercept, amount_coef, discount_coef) = (10.0, 3.0, -2.0);
    let regions = ["east", "north", "south", "west"];
    let mut stores = Vec::with_capacity(n);
    let mut sales = Vec::new();
    for s in 0..n {
        let k = rng.gen_range(1..=6);
        let (mut sa, mut sd) = (0.0, 0.0);
        for _ in 0..k {
            let amount = r4(rng.gen_range(0.0..5.0));
            let discount = r4(rng.gen_range(0.0..2.0));
            sa += amount;
            sd += discount;
            sales.push(vec![int(sales.len()), int(s), Value::Real(amount), Value::Real(discount)]);
        }
        let y = intercept + amount_coef * sa / k as f64 + discount_coef * sd / k as f64;
        stores.push(vec![int(s), Value::Text(regions[rng.gen_range(0..regions.len())].into()), Value::Real(y)]);
    }
    let relations = vec![
        relation("store", vec![a("id", RawType::Integer), a("region", RawType::Text), a("revenue", RawType::Real)], &[]),
        relation(
            "sale",
            vec![a("id", RawType::Integer), a("store_id", RawType::Integer), a("amount", RawType::Real), a("discount", RawType::Real)],
            &[("store_id", "store")],
        ),
    ];
    let rule = Rule::StarRegression {
        description: "store.revenue = intercept + amount_coef * mean(amount) + discount_coef * mean(discount) over the sales of the store".into(),
        intercept,
        amount_coef,
        discount_coef,
    };
    ("star_regression", relations, vec![stores, sales], target("store", "revenue", TaskKind::Regression), rule)
}

fn flat(rng: &mut ChaCha8Rng, n: usize) -> Parts {
    let weights = vec![1.5, -2.0, 1.0, 0.5];
    let color_offset = vec![("blue".to_string(), -0.5), ("green".to_string(), 0.0), ("red".to_string(), 0.5)];
    let (bias, margin) = (0.1, 0.25);
    let mut rows = Vec::with_capacity(n);
    while rows.len() < n {
        let x: Vec<f64> = (0..4).map(|_| r4(rng.gen_range(-1.0..1.0))).collect();
        let (color, off) = &color_offset[rng.gen_range(0..color_offset.len())];
        let score = weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + off + bias;
        if score.abs() < margin {
            continue;
        }
        let mut row = vec![int(rows.len())];
        row.extend(x.iter().map(|&v| Value::Real(v)));
        row.push(Value::Text(color.clone()));
        row.push(int((score > 0.0) as usize));
        rows.push(row);
    }
    let mut attrs = vec![a("id", RawType::Integer)];
    attrs.extend(["x1", "x2", "x3", "x4"].map(|c| a(c, RawType::Real)));
    attrs.push(a("color", RawType::Text));
    attrs.push(a("label", RawType::Integer));
    let rule = Rule::FlatTable {
        description: "sample.label = [weights . (x1, x2, x3, x4) + color_offset[color] + bias > 0]".into(),
        weights,
        color_offset,
        bias,
        margin,
    };
    ("flat_table", vec![relation("sample", attrs, &[])], vec![rows], target("sample", "label", TaskKind::Classification), rule)
}

fn weekday(rng: &mut ChaCha8Rng, n: usize) -> Parts {
    let weekdays = vec![0, 1, 2];
    let start = days_from_civil(2023, 1, 1).expect("valid date") * 86_400;
    let span = 2 * 365 * 86_400;
    let kinds = ["call", "mail", "visit"];
    let rows: Vec<Vec<Value>> = (0..n)
        .map(|i| {
            let ts = start + rng.gen_range(0..span);
            let label = weekdays.contains(&civil(ts).weekday);
            vec![int(i), Value::Timestamp(ts), Value::Text(kinds[rng.gen_range(0..kinds.len())].into()), Value::Real(r4(rng.gen_range(0.0..100.0))), int(label as usize)]
        })
        .collect();
    let relations = vec![relation(
        "event",
        vec![a("id", RawType::Integer), a("at", RawType::Timestamp), a("channel", RawType::Text), a("amount", RawType::Real), a("label", RawType::Integer)],
        &[],
    )];
    let rule = Rule::Weekday { description: "event.label = [weekday(at) is Monday, Tuesday or Wednesday], UTC".into(), weekdays };
    ("weekday", relations, vec![rows], target("event", "label", TaskKind::Classification), rule)
}

const FILLER: [&str; 40] = [
    "the", "order", "arrived", "yesterday", "please", "check", "my", "account", "thanks", "again", "team", "support", "hello", "today", "package",
    "number", "week", "customer", "service", "question", "about", "recent", "purchase", "store", "online", "app", "email", "phone", "help", "soon", "regards",
    "issue", "item", "box", "delivery", "status", "update", "request", "kindly", "note",
];

fn keyword(rng: &mut ChaCha8Rng, n: usize) -> Parts {
    let groups: Vec<Vec<String>> = [["refund", "invoice", "charged"], ["broken", "cracked", "damaged"]]
        .iter()
        .map(|g| g.iter().map(|s| s.to_string()).collect())
        .collect();
    let prio = ["high", "low", "normal"];
    let rows: Vec<Vec<Value>> = (0..n)
        .map(|i| {
            let label = rng.gen_range(0..groups.len());
            let mut words: Vec<&str> = (0..6).map(|_| FILLER[rng.gen_range(0..FILLER.len())]).collect();
            let kw = groups[label].choose(rng).expect("non-empty group");
            words.insert(rng.gen_range(0..=words.len()), kw);
            vec![int(i), Value::Text(words.join(" ")), Value::Text(prio[rng.gen_range(0..prio.len())].into()), int(label)]
        })
        .collect();
    let relations = vec![relation(
        "ticket",
        vec![a("id", RawType::Integer), a("body", RawType::Text), a("priority", RawType::Text), a("label", RawType::Integer)],
        &[],
    )];
    let rule = Rule::Keyword { description: "ticket.label is the index of the keyword group with a member among the words of body".into(), groups };
    ("keyword", relations, vec![rows], target("ticket", "label", TaskKind::Classification), rule)
}
