//! Plain-Rust recomputation of every value the bundled suite asserts.
//!
//! Each case yields, per turn, a map from assertion key to the value the
//! state should hold. Keys are the assertion path, or `len(path)` for
//! length assertions.

use std::collections::BTreeMap;

use cellagent::statebench::{Assertion, BenchCase, Comparator};
use serde_json::{json, Map, Value};

pub type Obs = BTreeMap<String, Value>;

pub fn key(a: &Assertion) -> String {
    match a.cmp {
        Comparator::Len => format!("len({})", a.path.text),
        _ => a.path.text.clone(),
    }
}

fn num_eq(a: &Value, b: &Value, tol: Option<f64>) -> bool {
    let (x, y) = (a.as_f64().unwrap(), b.as_f64().unwrap());
    match tol {
        Some(t) => (x - y).abs() <= t,
        None if a.is_f64() || b.is_f64() => (x - y).abs() <= 1e-9 * x.abs().max(y.abs()),
        None => x == y,
    }
}

fn deep_eq(a: &Value, b: &Value, tol: Option<f64>) -> bool {
    match (a, b) {
        (Value::Number(_), Value::Number(_)) => num_eq(a, b, tol),
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| deep_eq(p, q, tol)),
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, p)| y.get(k).is_some_and(|q| deep_eq(p, q, tol)))
        }
        _ => a == b,
    }
}

/// Whether `a` holds for a recomputed `actual`.
pub fn holds(a: &Assertion, actual: &Value) -> bool {
    let e = &a.expected;
    match a.cmp {
        Comparator::Eq | Comparator::Len => deep_eq(actual, e, a.tolerance),
        Comparator::Ne => !deep_eq(actual, e, a.tolerance),
        Comparator::Lt => actual.as_f64().unwrap() < e.as_f64().unwrap(),
        Comparator::Le => actual.as_f64().unwrap() <= e.as_f64().unwrap(),
        Comparator::Gt => actual.as_f64().unwrap() > e.as_f64().unwrap(),
        Comparator::Ge => actual.as_f64().unwrap() >= e.as_f64().unwrap(),
        Comparator::Contains => match actual {
            Value::Array(xs) => xs.contains(e),
            Value::Object(m) => e.as_str().is_some_and(|k| m.contains_key(k)),
            Value::String(s) => e.as_str().is_some_and(|k| s.contains(k)),
            _ => false,
        },
        Comparator::Type => actual == e,
    }
}

/// Per-turn observations for a bundled case; `None` for unknown ids.
pub fn observations(case: &BenchCase) -> Option<Vec<Obs>> {
    Some(match case.id.as_str() {
        "string_split_join" => string_split_join(),
        "dict_nested" => dict_nested(),
        "stack_advanced" => stack_advanced(),
        "cart_quantity" => cart_quantity(),
        "dataframe_merge" => dataframe_merge(),
        "dataframe_pivot" => dataframe_pivot(),
        "ndarray_reshape" => ndarray_reshape(),
        "volume_filter" => volume_filter(),
        "startup_journey" => startup_journey(),
        "weekend_party" => weekend_party(),
        "carol_debt_paydown" => carol(false),
        _ => return None,
    })
}

fn obs<const N: usize>(pairs: [(&str, Value); N]) -> Obs {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn string_split_join() -> Vec<Obs> {
    let mut parts: Vec<&str> = "a,b,c".split(',').collect();
    let t1 = parts.join(" | ");
    parts.sort();
    let t2 = parts.join(" | ");
    parts.reverse();
    let t3 = parts.join(" | ");
    [t1, t2, t3].into_iter().map(|t| obs([("text", json!(t))])).collect()
}

fn dict_nested() -> Vec<Obs> {
    let mut scores: BTreeMap<&str, i64> = [("math", 85), ("english", 90)].into();
    let snap = |s: &BTreeMap<&str, i64>| {
        let mut o: Obs = s
            .iter()
            .map(|(k, v)| (format!("data['scores']['{k}']"), json!(v)))
            .collect();
        o.insert("data['scores']".into(), json!(s));
        o
    };
    let mut out = Vec::new();
    scores.insert("math", 90);
    out.push(snap(&scores));
    scores.insert("science", 88);
    out.push(snap(&scores));
    for v in scores.values_mut() {
        *v += 5;
    }
    out.push(snap(&scores));
    out
}

fn stack_advanced() -> Vec<Obs> {
    let mut items: Vec<&str> = Vec::new();
    let mut out = Vec::new();
    items.extend(["A", "B", "C", "D"]);
    out.push(obs([("stack.size()", json!(items.len()))]));
    let mut popped = 0;
    while items.len() > 1 {
        items.pop();
        popped += 1;
    }
    out.push(obs([("stack.size()", json!(items.len())), ("result_num", json!(popped))]));
    out.push(obs([
        ("stack.size()", json!(items.len())),
        ("result_str", json!(items.last().unwrap())),
    ]));
    out
}

fn cart_quantity() -> Vec<Obs> {
    let mut items: Vec<(f64, i64)> = Vec::new();
    let mut out = Vec::new();
    items.push((10.0, 3));
    out.push(obs([("len(cart.items)", json!(1)), ("cart.items[0]['quantity']", json!(items[0].1))]));
    items.push((5.0, 2));
    out.push(obs([
        ("len(cart.items)", json!(items.len())),
        ("cart.items[1]['quantity']", json!(items[1].1)),
    ]));
    let total: f64 = items.iter().map(|(p, q)| p * *q as f64).sum();
    out.push(obs([("result_num", json!(total))]));
    out
}

fn dataframe_merge() -> Vec<Obs> {
    let prices = [("Phone", 500.0), ("Laptop", 1200.0), ("Shirt", 50.0)];
    let suppliers = [("Phone", "SupA"), ("Laptop", "SupB"), ("Shirt", "SupA")];
    let merged: Vec<(&str, f64, &str)> = prices
        .iter()
        .filter_map(|(p, v)| suppliers.iter().find(|(q, _)| q == p).map(|(_, s)| (*p, *v, *s)))
        .collect();
    let filtered: Vec<_> = merged.iter().filter(|r| r.2 == "SupA").collect();
    vec![
        obs([
            ("len(result_df)", json!(merged.len())),
            ("result_df.columns", json!(["product", "price", "supplier"])),
        ]),
        obs([("len(result_df)", json!(filtered.len()))]),
        obs([("result_value", json!(filtered.iter().map(|r| r.1).sum::<f64>()))]),
    ]
}

fn dataframe_pivot() -> Vec<Obs> {
    let rows = [
        ("North", 150),
        ("North", 160),
        ("South", 200),
        ("South", 180),
        ("East", 90),
        ("East", 110),
    ];
    let mut by_region: BTreeMap<&str, i64> = BTreeMap::new();
    for (r, s) in rows {
        *by_region.entry(r).or_default() += s;
    }
    let total: i64 = by_region.values().sum();
    let (best, best_sum) = by_region.iter().max_by_key(|(_, s)| **s).unwrap();
    vec![
        obs([("result_df.shape", json!([by_region.len(), 2]))]),
        obs([("result_value", json!(total))]),
        obs([("result_value", json!(best_sum)), ("result_str", json!(best))]),
    ]
}

fn ndarray_reshape() -> Vec<Obs> {
    let arr = [10, 15, 20, 25, 5, 10, 15, 18];
    let rows: Vec<i64> = arr.chunks(4).map(|c| c.iter().sum()).collect();
    vec![
        obs([("result_array.shape", json!([2, 4]))]),
        obs([("result_array", json!(rows))]),
        obs([("result_value", json!(rows.iter().sum::<i64>()))]),
    ]
}

fn volume_filter() -> Vec<Obs> {
    let high: Vec<(usize, i64, f64)> = (0..100usize)
        .map(|i| {
            let base = if (i * 37) % 100 < 42 { 2_000_000 } else { 400_000 };
            (i, base + i as i64 * 1000, 100.0 + i as f64)
        })
        .filter(|r| r.1 > 1_000_000)
        .collect();
    let mean = high.iter().map(|r| r.2).sum::<f64>() / high.len() as f64;
    let top = high.iter().max_by_key(|r| r.1).unwrap();
    vec![
        obs([("len(high_vol)", json!(high.len()))]),
        obs([("result_value", json!(mean))]),
        obs([("result_str", json!(format!("T{:03}", top.0)))]),
    ]
}

fn startup_journey() -> Vec<Obs> {
    let mut s = Map::new();
    let mut out = Vec::new();
    let set = |s: &mut Map<String, Value>, k: &str, v: Value| {
        s.insert(k.to_string(), v);
    };
    let snap = |s: &Map<String, Value>| -> Obs { s.iter().map(|(k, v)| (k.clone(), v.clone())).collect() };
    for (k, v) in [
        ("company_name", json!("TechStart")),
        ("industry", json!("Software")),
        ("ceo", json!("Alice Johnson")),
        ("headquarters", json!("San Francisco")),
        ("employees", json!(50)),
        ("founded_year", json!(2020)),
        ("offices", json!(1)),
        ("products", json!(2)),
        ("revenue", json!(5e6)),
        ("profit_margin", json!(0.1)),
        ("stock_price", json!(0.0)),
        ("market_cap", json!(0.0)),
        ("public", json!(false)),
        ("profitable", json!(true)),
        ("hiring", json!(true)),
        ("international", json!(false)),
        ("departments", json!(["Engineering", "Sales", "Marketing"])),
        ("locations", json!(["SF"])),
        ("financials", json!({"funding": 10_000_000, "round": "Series A"})),
        ("contacts", json!({"email": "info@techstart.com", "phone": "555-0100"})),
    ] {
        set(&mut s, k, v);
    }
    out.push(snap(&s));

    let push = |s: &mut Map<String, Value>, k: &str, items: &[&str]| {
        let list = s[k].as_array_mut().unwrap();
        list.extend(items.iter().map(|i| json!(i)));
    };
    let add = |s: &mut Map<String, Value>, k: &str, field: &str, v: Value| {
        s[k].as_object_mut().unwrap().insert(field.to_string(), v);
    };
    set(&mut s, "employees", json!(150));
    set(&mut s, "offices", json!(3));
    set(&mut s, "products", json!(5));
    set(&mut s, "revenue", json!(15e6));
    set(&mut s, "profit_margin", json!(0.15));
    set(&mut s, "international", json!(true));
    push(&mut s, "departments", &["HR", "Finance"]);
    push(&mut s, "locations", &["NYC", "London"]);
    add(&mut s, "financials", "valuation", json!(100_000_000));
    add(&mut s, "contacts", "support", json!("555-0200"));
    out.push(snap(&s));

    let name = format!("{} Inc.", s["company_name"].as_str().unwrap());
    set(&mut s, "company_name", json!(name));
    set(&mut s, "industry", json!("Enterprise Software"));
    set(&mut s, "employees", json!(500));
    set(&mut s, "offices", json!(10));
    set(&mut s, "products", json!(10));
    set(&mut s, "revenue", json!(50e6));
    set(&mut s, "profit_margin", json!(0.2));
    set(&mut s, "stock_price", json!(25.0));
    set(&mut s, "market_cap", json!(500e6));
    set(&mut s, "public", json!(true));
    push(&mut s, "departments", &["Legal", "IR"]);
    push(&mut s, "locations", &["Tokyo", "Berlin"]);
    add(&mut s, "financials", "ipo", json!(true));
    add(&mut s, "contacts", "ir", json!("ir@techstart.com"));
    out.push(snap(&s));
    out
}

#[derive(Clone)]
struct Home {
    music: i64,
    living_light: i64,
    bedroom_light: bool,
    blinds: i64,
    mode: &'static str,
    temp: i64,
    camera: &'static str,
    door_locked: bool,
    outdoor_temp: i64,
}

impl Home {
    fn obs(&self) -> Obs {
        obs([
            ("home.music", json!(self.music)),
            ("home.living_light", json!(self.living_light)),
            ("home.bedroom_light", json!(self.bedroom_light)),
            ("home.blinds", json!(self.blinds)),
            ("home.thermostat_mode", json!(self.mode)),
            ("home.thermostat_temp", json!(self.temp)),
            ("home.camera", json!(self.camera)),
            ("home.door_locked", json!(self.door_locked)),
            ("home.outdoor_temp", json!(self.outdoor_temp)),
        ])
    }

    fn preset(&mut self, mode: &'static str) {
        self.mode = mode;
        self.temp = match mode {
            "sleep" => 17,
            "eco" => 18,
            "comfort" => 21,
            other => panic!("no preset {other}"),
        };
    }
}

fn weekend_party() -> Vec<Obs> {
    let mut h = Home {
        music: 0,
        living_light: 30,
        bedroom_light: true,
        blinds: 0,
        mode: "eco",
        temp: 18,
        camera: "idle",
        door_locked: true,
        outdoor_temp: 15,
    };
    let mut out = Vec::new();
    for turn in 1..=40 {
        match turn {
            1 => {
                h.blinds = 50;
                h.bedroom_light = false;
            }
            2 => {
                h.door_locked = true;
                h.camera = "recording";
                h.blinds = 0;
            }
            3 => {
                h.preset("comfort");
                h.music = 40;
                h.blinds = 100;
                h.living_light = 80;
            }
            4 => {
                h.door_locked = false;
                h.music += 10;
            }
            5 => {
                h.music += 10;
                h.living_light = 90;
                h.camera = "recording";
            }
            6 => h.blinds = 30,
            7 => {
                h.blinds = 0;
                h.living_light = 60;
                h.music += 10;
            }
            8 => h.music += 10,
            9 => h.bedroom_light = true,
            10 => {
                h.music -= 30;
                h.door_locked = true;
                h.bedroom_light = false;
            }
            11 => {
                h.music = 0;
                h.living_light = 30;
            }
            12 => h.preset("eco"),
            13 => {
                h.living_light = 0;
                h.bedroom_light = false;
            }
            14 => {
                h.camera = "recording";
                h.living_light = 30;
            }
            15 => h.living_light = 0,
            16 => {}
            17 => {
                h.bedroom_light = true;
                h.blinds = 70;
                h.preset("comfort");
            }
            18 => h.music = 20,
            19 => {
                h.camera = "idle";
                h.door_locked = false;
            }
            20 => {
                h.door_locked = true;
                h.music = 0;
            }
            21 => h.music = 40,
            22 => h.music += 10,
            23 => h.living_light = 60,
            24 => h.living_light -= 10,
            25 => {
                h.outdoor_temp = 8;
                h.mode = "heat";
                h.temp = 22;
            }
            26 => h.blinds = 20,
            27 => {
                h.music = 0;
                h.living_light = 30;
            }
            28 => h.living_light -= 10,
            29 => h.living_light = 80,
            30 => h.temp -= 2,
            31 => {
                h.door_locked = false;
                h.music = 40;
            }
            32 => h.music += 10,
            33 => {
                h.door_locked = true;
                h.music -= 10;
            }
            34 => h.camera = "recording",
            35 => h.preset("sleep"),
            36 => {
                h.blinds = 0;
                h.living_light = 0;
            }
            37 => h.bedroom_light = true,
            38 => {
                h.bedroom_light = false;
                h.living_light = 0;
            }
            39 => {
                h.preset("comfort");
                h.blinds = 70;
            }
            40 => {
                h.door_locked = true;
                h.music = 0;
                h.living_light = 0;
                h.bedroom_light = false;
            }
            _ => unreachable!(),
        }
        out.push(h.obs());
    }
    out
}

struct Carol {
    balance: f64,
    loan: f64,
    rate: f64,
    savings: f64,
    status: &'static str,
    net_worth: Option<f64>,
}

impl Carol {
    fn obs(&self) -> Obs {
        let mut o = obs([
            ("account_name", json!("Carol")),
            ("balance", json!(self.balance)),
            ("loan_balance", json!(self.loan)),
            ("loan_rate", json!(self.rate)),
            ("savings", json!(self.savings)),
            ("status", json!(self.status)),
        ]);
        if let Some(n) = self.net_worth {
            o.insert("net_worth".into(), json!(n));
        }
        o
    }

    fn interest(&mut self) {
        self.loan += (self.loan * self.rate).trunc();
    }

    fn pay(&mut self, amount: f64) {
        self.balance -= amount;
        self.loan -= amount;
    }

    fn save(&mut self, share: f64) {
        let moved = (self.balance * share).trunc();
        self.savings += moved;
        self.balance -= moved;
    }

    fn unsave(&mut self) {
        self.balance += self.savings;
        self.savings = 0.0;
    }

    fn payoff_or_most(&mut self) {
        if self.balance > self.loan {
            self.balance -= self.loan;
            self.loan = 0.0;
        } else {
            self.pay((self.loan * 0.75).trunc());
        }
    }
}

/// The Carol trajectory; `sabotage` adds one to the turn-2 interest.
pub fn carol(sabotage: bool) -> Vec<Obs> {
    let mut c = Carol {
        balance: 500.0,
        loan: 2000.0,
        rate: 0.08,
        savings: 0.0,
        status: "standard",
        net_worth: None,
    };
    let mut out = vec![c.obs()];
    for turn in 2..=40 {
        match turn {
            2 => {
                c.interest();
                if sabotage {
                    c.loan += 1.0;
                }
            }
            3 | 9 | 17 | 33 => c.balance += 800.0,
            4 => c.pay((c.balance * 0.15).trunc().min((c.loan * 0.15).trunc())),
            5 => c.save(0.2),
            6 | 10 | 22 | 28 | 34 => c.interest(),
            7 => c.balance += 690.0,
            8 => c.pay((c.balance * 0.4).trunc().max(500.0)),
            11 => c.pay(440.0),
            12 | 26 | 38 => c.unsave(),
            13 => c.balance += 120.0,
            14 | 35 => {
                if c.loan < c.balance {
                    c.status = "premium";
                }
            }
            15 | 36 => {
                if c.status == "premium" {
                    c.balance += 300.0;
                }
            }
            16 | 37 => c.payoff_or_most(),
            18 => c.save(0.25),
            19 => c.savings += (c.savings * 0.02).trunc(),
            20 => c.balance -= 650.0,
            21 => {
                c.loan = 3000.0;
                c.rate = 0.06;
            }
            23 => c.balance += 1200.0,
            24 => c.pay((c.balance * 0.3).trunc().min((c.loan * 0.2).trunc())),
            25 => {
                if c.status == "premium" {
                    c.balance += 100.0;
                }
            }
            27 => c.pay((c.balance * 0.5).trunc().max(800.0)),
            29 => c.balance += 950.0,
            30 => {
                if c.loan > c.balance {
                    c.status = "standard";
                }
            }
            31 => c.pay((c.loan * 0.6).trunc()),
            32 => c.save(0.1),
            39 => c.balance -= 248.0,
            40 => c.net_worth = Some(c.balance + c.savings - c.loan),
            _ => unreachable!(),
        }
        out.push(c.obs());
    }
    out
}

/// 1-based turns whose assertions fail against `observed`.
pub fn failing_turns(case: &BenchCase, observed: &[Obs]) -> Vec<usize> {
    case.turns
        .iter()
        .zip(observed)
        .enumerate()
        .filter(|(_, (t, o))| {
            !t.validator
                .assertions
                .iter()
                .all(|a| o.get(&key(a)).is_some_and(|v| holds(a, v)))
        })
        .map(|(i, _)| i + 1)
        .collect()
}
