//! Deterministic random model generation for round-trip and fuzz tests.
//! Compiled only with the `testgen` feature.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::expr::{BinOp, Builtin, Expr};
use crate::lookup::LookupTable;
use crate::model::{Flow, Item, LookupSource, Model, Stock, TimeSpec};
use crate::parser::is_keyword;

fn fresh_ident(rng: &mut impl Rng, used: &mut HashSet<String>) -> String {
    loop {
        let len = rng.random_range(1..=8);
        let mut name = String::new();
        name.push(rng.random_range(b'a'..=b'z') as char);
        for _ in 1..len {
            let c = match rng.random_range(0..3) {
                0 => rng.random_range(b'a'..=b'z') as char,
                1 => rng.random_range(b'0'..=b'9') as char,
                _ => '_',
            };
            name.push(c);
        }
        if !is_keyword(&name) && used.insert(name.clone()) {
            return name;
        }
    }
}

/// Any finite f64, with a bias toward awkward values (full-bit-pattern
/// floats, subnormals, negative zero) so serialization exactness is earned.
pub fn finite_value(rng: &mut impl Rng) -> f64 {
    match rng.random_range(0..4) {
        0 => loop {
            let v = f64::from_bits(rng.random::<u64>());
            if v.is_finite() {
                return v;
            }
        },
        1 => *[0.0, -0.0, 0.017, 1e-12, 1e12, 5e-324, -3.5, 100.0]
            .choose(rng)
            .unwrap(),
        _ => rng.random_range(-1e6..1e6),
    }
}

fn random_expr(rng: &mut impl Rng, values: &[String], lookups: &[String], depth: u32) -> Expr {
    let leaf = depth == 0 || rng.random_bool(0.4);
    if leaf {
        match rng.random_range(0..3) {
            0 => Expr::Literal(finite_value(rng)),
            1 if !values.is_empty() => Expr::reference(values.choose(rng).unwrap().clone()),
            _ => Expr::Time,
        }
    } else {
        match rng.random_range(0..6) {
            0..=2 => {
                let op = *[BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div]
                    .choose(rng)
                    .unwrap();
                Expr::binary(
                    op,
                    random_expr(rng, values, lookups, depth - 1),
                    random_expr(rng, values, lookups, depth - 1),
                )
            }
            3 => Expr::Neg(Box::new(random_expr(rng, values, lookups, depth - 1))),
            4 => {
                let builtin = *[Builtin::Exp, Builtin::Min, Builtin::Max].choose(rng).unwrap();
                let args = (0..builtin.arity())
                    .map(|_| random_expr(rng, values, lookups, depth - 1))
                    .collect();
                Expr::Call(builtin, args)
            }
            _ if !lookups.is_empty() => Expr::lookup(
                lookups.choose(rng).unwrap().clone(),
                random_expr(rng, values, lookups, depth - 1),
            ),
            _ => Expr::Literal(finite_value(rng)),
        }
    }
}

fn random_table(rng: &mut impl Rng) -> LookupTable {
    let n = rng.random_range(1..=6);
    let mut ts: Vec<f64> = (0..n).map(|_| rng.random_range(-1e4..1e4)).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let points: Vec<(f64, f64)> = ts.into_iter().map(|t| (t, finite_value(rng))).collect();
    LookupTable::new(points).unwrap()
}

fn random_path(rng: &mut impl Rng) -> String {
    let n = rng.random_range(1..=15);
    (0..n)
        .map(|_| {
            *[
                'a', 'b', 'c', 'd', '/', '.', '_', '-', '"', '\\', ' ', '#',
            ]
            .choose(rng)
            .unwrap()
        })
        .collect()
}

/// A random valid model: passes validation, exercises every statement form,
/// and shuffles declaration order across categories.
pub fn random_model(rng: &mut impl Rng) -> Model {
    let mut used = HashSet::new();
    let model_name = fresh_ident(rng, &mut HashSet::new());

    let start: f64 = rng.random_range(-50.0..50.0);
    let span: f64 = rng.random_range(0.1..100.0);
    let step = span * rng.random_range(0.01..0.9);
    let spec = TimeSpec::new(start, start + span, step);

    let n_params = rng.random_range(0..=4);
    let n_lookups = rng.random_range(0..=2);
    let n_stocks = rng.random_range(0..=3);
    let n_outputs = rng.random_range(0..=3);
    let n_flows = if n_stocks == 0 { 0 } else { rng.random_range(0..=4) };

    let params: Vec<String> = (0..n_params).map(|_| fresh_ident(rng, &mut used)).collect();
    let lookups: Vec<String> = (0..n_lookups).map(|_| fresh_ident(rng, &mut used)).collect();
    let stocks: Vec<String> = (0..n_stocks).map(|_| fresh_ident(rng, &mut used)).collect();
    let outputs: Vec<String> = (0..n_outputs).map(|_| fresh_ident(rng, &mut used)).collect();
    let flows: Vec<String> = (0..n_flows).map(|_| fresh_ident(rng, &mut used)).collect();

    let values: Vec<String> = params.iter().chain(&stocks).cloned().collect();

    let mut items: Vec<Item> = Vec::new();
    for name in &params {
        items.push(Item::Parameter {
            name: name.clone(),
            value: finite_value(rng),
        });
    }
    for name in &lookups {
        let source = if rng.random_bool(0.3) {
            LookupSource::File {
                path: random_path(rng),
            }
        } else {
            LookupSource::Inline(random_table(rng))
        };
        items.push(Item::Lookup {
            name: name.clone(),
            source,
        });
    }
    for name in &stocks {
        items.push(Item::Stock(Stock {
            name: name.clone(),
            initial_value: finite_value(rng),
        }));
    }
    for name in &flows {
        let (source, sink) = match rng.random_range(0..3) {
            0 => (None, Some(stocks.choose(rng).unwrap().clone())),
            1 => (Some(stocks.choose(rng).unwrap().clone()), None),
            _ if stocks.len() >= 2 => {
                let mut pick = stocks.clone();
                pick.shuffle(rng);
                (Some(pick[0].clone()), Some(pick[1].clone()))
            }
            _ => (Some(stocks[0].clone()), None),
        };
        items.push(Item::Flow(Flow {
            name: name.clone(),
            source,
            sink,
            rate: random_expr(rng, &values, &lookups, 3),
        }));
    }
    for name in &outputs {
        items.push(Item::Output {
            name: name.clone(),
            expr: random_expr(rng, &values, &lookups, 3),
        });
    }
    items.shuffle(rng);

    let mut model = Model::new(model_name, spec);
    for item in items {
        model.add_item(item);
    }
    model
}

/// A line of grammar-adjacent token soup for fuzzing the parser's error
/// paths harder than uniform random text does.
pub fn random_statement_soup(rng: &mut impl Rng) -> String {
    const PIECES: &[&str] = &[
        "model", "time", "param", "lookup", "stock", "flow", "output", "rate", "inline", "from",
        "step", "exp", "min", "max", "->", "..", "(", ")", "{", "}", ",", "=", ":", "+", "-",
        "*", "/", "\"", "#", "0", "1.5", "-2", "1e9", "1e999", "12x", "s", "k_1", ".", "@",
        "caf\u{e9}",
    ];
    let n = rng.random_range(0..12);
    let mut line = String::new();
    for i in 0..n {
        if i > 0 && rng.random_bool(0.8) {
            line.push(' ');
        }
        line.push_str(PIECES.choose(rng).unwrap());
    }
    line
}
