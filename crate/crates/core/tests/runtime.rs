use std::collections::BTreeMap;
use std::process::Command;

use cellagent::descriptor::{describe_function, render_function, VariableDescriptor};
use cellagent::runtime::{
    create_runtime, define_value, eval_value, restore, values_equal, ErrorKind, Origin, RuntimeConfig, RuntimeError,
    RuntimeHandle, Snapshot,
};
use proptest::prelude::*;
use pyo3::prelude::*;

fn rt() -> RuntimeHandle {
    create_runtime(RuntimeConfig::default()).unwrap()
}

fn int(rt: &RuntimeHandle, name: &str) -> i64 {
    let v = rt.get_variable(name).unwrap();
    Python::attach(|py| v.bind(py).extract().unwrap())
}

fn repr(rt: &RuntimeHandle, name: &str) -> String {
    let v = rt.get_variable(name).unwrap();
    Python::attach(|py| v.bind(py).repr().unwrap().to_string())
}

#[test]
fn fresh_runtime_is_empty() {
    let rt = rt();
    assert!(rt.list_entries().is_empty());
    assert_eq!(rt.cell_counter(), 0);
    assert!(matches!(rt.get_variable("missing"), Err(RuntimeError::NotFound(n)) if n == "missing"));
}

#[test]
fn runtimes_are_isolated() {
    let a = rt();
    let b = rt();
    a.execute_cell("x = 1").unwrap();
    assert!(matches!(b.get_variable("x"), Err(RuntimeError::NotFound(_))));
}

#[test]
fn x_equals_five_persists() {
    let rt = rt();
    rt.execute_cell("x = 5").unwrap();
    assert_eq!(rt.execute_cell("print(x)").unwrap().stdout, "5\n");
}

#[test]
fn division_by_zero_is_captured() {
    let rt = rt();
    rt.execute_cell("keep = 1").unwrap();
    let names = rt.names();
    let out = rt.execute_cell("1/0").unwrap();
    assert_eq!(out.error.as_ref().unwrap().kind, ErrorKind::Runtime);
    assert_eq!(rt.names(), names);
    assert_eq!(rt.cell_counter(), 2);
    assert_eq!(out.source, "1/0");
}

#[test]
fn filter_cell_yields_42_rows() {
    let rt = rt();
    rt.execute_cell(
        "rows = [{'volume': (2_000_000 if (i * 37) % 100 < 42 else 400_000) + i * 1000} for i in range(100)]",
    )
    .unwrap();
    let out = rt
        .execute_cell("high_vol = [r for r in rows if r['volume'] > 1e6]\nprint(f'Filtered. Rows: {len(high_vol)}')")
        .unwrap();
    assert_eq!(out.stdout, "Filtered. Rows: 42\n");
    assert_eq!(rt.execute_cell("print(len(high_vol))").unwrap().stdout, "42\n");
}

#[test]
fn injected_object_methods_run_live() {
    let rt = rt();
    let processor = define_value(
        "class DataProcessor:\n    def __init__(self):\n        self.calls = 0\n    def process(self, data):\n        self.calls += 1\n        return [d * 2 for d in data]\nprocessor = DataProcessor()",
        "processor",
    )
    .unwrap();
    let entry = rt
        .inject_variable(
            VariableDescriptor::new("processor", "DataProcessor", "Doubles data"),
            Python::attach(|py| processor.clone_ref(py)),
            false,
        )
        .unwrap();
    assert_eq!(entry.origin, Origin::Injected);
    rt.execute_cell("data = [1, 2]\nout = processor.process(data)").unwrap();
    assert_eq!(repr(&rt, "out"), "[2, 4]");
    let calls: i64 = Python::attach(|py| processor.bind(py).getattr("calls").unwrap().extract().unwrap());
    assert_eq!(calls, 1);
}

#[test]
fn inject_then_get_round_trips() {
    let rt = rt();
    rt.inject_variable(VariableDescriptor::new("n", "int", ""), eval_value("0").unwrap(), false)
        .unwrap();
    assert_eq!(int(&rt, "n"), 0);
    let err = rt.inject_variable(VariableDescriptor::new("n", "int", ""), eval_value("1").unwrap(), false);
    assert!(matches!(err, Err(RuntimeError::NameCollision(_))));
    rt.inject_variable(VariableDescriptor::new("n", "int", ""), eval_value("1").unwrap(), true)
        .unwrap();
    assert_eq!(int(&rt, "n"), 1);
    for bad in ["1x", "a-b", ""] {
        let err = rt.inject_variable(VariableDescriptor::new(bad, "int", ""), eval_value("1").unwrap(), false);
        assert!(matches!(err, Err(RuntimeError::InvalidIdentifier(_))), "{bad:?}");
    }
    let err = rt.inject_variable(VariableDescriptor::new("print", "int", ""), eval_value("1").unwrap(), false);
    assert!(matches!(err, Err(RuntimeError::BuiltinCollision(_))));
}

#[test]
fn carol_setup_over_injected_record() {
    let rt = rt();
    let record = eval_value("{'name': 'Carol', 'status': 'standard', 'rate': 0.08}").unwrap();
    rt.inject_variable(VariableDescriptor::new("account", "dict", "Carol's account"), record, false)
        .unwrap();
    rt.execute_cell("balance = 500\nloan_balance = 2000\nstatus = account['status']").unwrap();
    assert_eq!(int(&rt, "loan_balance"), 2000);
}

#[test]
fn injected_functions_are_callable() {
    let rt = rt();
    let add = define_value("def add(a, b):\n    \"\"\"Add two numbers.\"\"\"\n    return a + b", "add").unwrap();
    let desc = describe_function(&add, None).unwrap();
    rt.inject_function(desc, add, false).unwrap();
    assert_eq!(rt.execute_cell("print(add(2, 3))").unwrap().stdout, "5\n");

    let buy = define_value(
        "def buy_stock(symbol: str, quantity: int) -> bool:\n    \"\"\"Buy shares.\"\"\"\n    return True",
        "buy_stock",
    )
    .unwrap();
    let desc = describe_function(&buy, None).unwrap();
    assert!(render_function(&desc).contains("buy_stock(symbol: str, quantity: int) -> bool"));
    rt.inject_function(desc.clone(), buy, false).unwrap();

    let err = rt.inject_function(
        cellagent::descriptor::FunctionDescriptor { name: "nope".into(), ..desc },
        eval_value("3").unwrap(),
        false,
    );
    assert!(matches!(err, Err(RuntimeError::NotCallable(_))));
}

#[test]
fn case_values_are_retrievable() {
    let rt = rt();
    rt.execute_cell("items = ['A', 'B', 'C', 'D']\nresult_num = 0\nwhile len(items) > 1:\n    items.pop()\n    result_num += 1")
        .unwrap();
    assert_eq!(int(&rt, "result_num"), 3);
    rt.execute_cell("cart = [(10.0, 3), (5.0, 2)]\nresult_num = sum(p * q for p, q in cart)").unwrap();
    assert_eq!(repr(&rt, "result_num"), "40.0");
}

#[test]
fn entries_track_origin() {
    let rt = rt();
    rt.inject_variable(VariableDescriptor::new("x", "int", ""), eval_value("1").unwrap(), false)
        .unwrap();
    rt.execute_cell("y = 1").unwrap();
    let origins: BTreeMap<_, _> = rt.list_entries().into_iter().map(|e| (e.name, e.origin)).collect();
    assert_eq!(origins["x"], Origin::Injected);
    assert_eq!(origins["y"], Origin::CellCreated);
    assert_eq!(origins.len(), 2);
}

#[test]
fn twenty_variable_state_is_listed() {
    let rt = rt();
    let case = cellagent::statebench::bundled_suite()
        .unwrap()
        .into_iter()
        .find(|c| c.id == "startup_journey")
        .unwrap();
    rt.execute_cell(&case.setup_source).unwrap();
    rt.execute_cell(case.turns[0].oracle.as_deref().unwrap()).unwrap();
    let names: Vec<_> = rt.list_entries().into_iter().map(|e| e.name).collect();
    assert!(names.len() >= 20);
    assert!(names.contains(&"employees".to_string()));
}

#[test]
fn snapshot_examples() {
    let rt = rt();
    rt.execute_cell("x = 5\nimport socket\nsock = socket.socket()").unwrap();
    let snap = rt.snapshot().unwrap();
    assert!(snap.skipped.iter().any(|s| s.name == "sock"));
    let text = snap.to_json().unwrap();
    let back = restore(&Snapshot::from_json(&text).unwrap(), RuntimeConfig::default()).unwrap();
    assert_eq!(back.execute_cell("print(x)").unwrap().stdout, "5\n");
    rt.execute_cell("sock.close()").unwrap();
}

#[test]
fn mid_carol_snapshot_continues_identically() {
    let case = cellagent::statebench::bundled_suite()
        .unwrap()
        .into_iter()
        .find(|c| c.id == "carol_debt_paydown")
        .unwrap();
    let cells: Vec<&str> = case.turns.iter().map(|t| t.oracle.as_deref().unwrap()).collect();
    let straight = rt();
    for c in &cells {
        straight.execute_cell(c).unwrap();
    }
    let first = rt();
    for c in &cells[..4] {
        first.execute_cell(c).unwrap();
    }
    assert_eq!(int(&first, "loan_balance"), 1965);
    let resumed = restore(&first.snapshot().unwrap(), RuntimeConfig::default()).unwrap();
    for c in &cells[4..] {
        resumed.execute_cell(c).unwrap();
    }
    for name in straight.names() {
        assert!(
            values_equal(&straight.get_variable(&name).unwrap(), &resumed.get_variable(&name).unwrap()),
            "{name}"
        );
    }
    assert_eq!(straight.names(), resumed.names());
}

#[test]
fn reset_examples() {
    let rt = rt();
    rt.execute_cell("x = 1").unwrap();
    rt.reset().unwrap();
    assert!(matches!(rt.get_variable("x"), Err(RuntimeError::NotFound(_))));
    rt.reset().unwrap();
    assert_eq!(rt.execute_cell("x = 1").unwrap().cell_index, 1);
    assert!(rt.injected_manifest().is_empty());
}

#[derive(Debug, Clone)]
enum Op {
    Assign(usize, i64),
    AppendTo(usize, i64),
    Delete(usize),
    Fail(usize, i64),
}

const NAMES: [&str; 5] = ["a", "b", "c", "d", "e"];

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..5usize, -1000..1000i64).prop_map(|(n, v)| Op::Assign(n, v)),
        (0..5usize, -1000..1000i64).prop_map(|(n, v)| Op::AppendTo(n, v)),
        (0..5usize).prop_map(Op::Delete),
        (0..5usize, -1000..1000i64).prop_map(|(n, v)| Op::Fail(n, v)),
    ]
}

/// Model of the namespace: scalars or lists of ints.
#[derive(Debug, Clone, PartialEq)]
enum Val {
    Int(i64),
    List(Vec<i64>),
}

fn render(v: &Val) -> String {
    match v {
        Val::Int(i) => i.to_string(),
        Val::List(xs) => format!("[{}]", xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn persistence_and_error_isolation(ops in prop::collection::vec(op(), 1..25)) {
        let rt = rt();
        let mut model: BTreeMap<&str, Val> = BTreeMap::new();
        for (i, op) in ops.iter().enumerate() {
            let before = rt.names();
            match op {
                Op::Assign(n, v) => {
                    let name = NAMES[*n];
                    rt.execute_cell(&format!("{name} = {v}")).unwrap();
                    model.insert(name, Val::Int(*v));
                }
                Op::AppendTo(n, v) => {
                    let name = NAMES[*n];
                    let out = rt.execute_cell(&format!("{name} = list({name}) if isinstance({name}, list) else [] \n{name}.append({v})"));
                    let out = out.unwrap();
                    if model.contains_key(name) {
                        prop_assert!(out.is_ok());
                        let mut xs = match model.get(name) { Some(Val::List(xs)) => xs.clone(), _ => vec![] };
                        xs.push(*v);
                        model.insert(name, Val::List(xs));
                    } else {
                        prop_assert_eq!(out.error.unwrap().exception, "NameError");
                    }
                }
                Op::Delete(n) => {
                    let name = NAMES[*n];
                    let out = rt.execute_cell(&format!("del {name}")).unwrap();
                    prop_assert_eq!(out.is_ok(), model.remove(name).is_some());
                }
                Op::Fail(n, v) => {
                    let name = NAMES[*n];
                    let out = rt.execute_cell(&format!("{name} = {v}\nfresh_{i} = 1\nraise ValueError('x')")).unwrap();
                    prop_assert_eq!(out.error.unwrap().kind, ErrorKind::Runtime);
                    prop_assert_eq!(rt.names(), before);
                }
            }
            prop_assert_eq!(rt.cell_counter(), i as u64 + 1);
            for name in NAMES {
                match model.get(name) {
                    Some(v) => prop_assert_eq!(repr(&rt, name), render(v)),
                    None => prop_assert!(!rt.contains(name)),
                }
            }
        }
        rt.reset().unwrap();
        prop_assert!(rt.list_entries().is_empty());
    }

    #[test]
    fn injection_round_trip(v in prop_oneof![
        any::<i64>().prop_map(|i| i.to_string()),
        "[a-z ]{0,12}".prop_map(|s| format!("{s:?}")),
        prop::collection::vec(any::<i32>(), 0..6).prop_map(|xs| format!("{xs:?}")),
    ]) {
        let rt = rt();
        let value = eval_value(&v).unwrap();
        rt.inject_variable(VariableDescriptor::new("v", "any", ""), Python::attach(|py| value.clone_ref(py)), false).unwrap();
        let got = rt.get_variable("v").unwrap();
        prop_assert!(values_equal(&value, &got));
        prop_assert!(Python::attach(|py| got.bind(py).is(value.bind(py))));
    }

    #[test]
    fn outcome_matches_a_fresh_interpreter(
        setup in prop::collection::vec((0..5usize, -50..50i64), 0..4),
        body in prop_oneof![
            (0..5usize).prop_map(|n| format!("print({0} if '{0}' in globals() else 'none')", NAMES[n])),
            "[a-zA-Z0-9 éß✓]{0,20}".prop_map(|s| format!("print({s:?} * 2, end='!')")),
            (1..6i64).prop_map(|k| format!("for i in range({k}):\n    print(i, i * i, sep=',')")),
            (0..4usize).prop_map(|n| format!("import sys\nprint('err', file=sys.stderr)\nprint({n})")),
        ],
    ) {
        let rt = rt();
        let mut prefix = String::new();
        for (n, v) in &setup {
            let line = format!("{} = {v}\n", NAMES[*n]);
            rt.execute_cell(&line).unwrap();
            prefix.push_str(&line);
        }
        let out = rt.execute_cell(&body).unwrap();
        let script = format!(
            "import contextlib, io, sys\nns = {{}}\nwith contextlib.redirect_stdout(io.StringIO()):\n    exec({prefix:?}, ns)\nexec({body:?}, ns)\n"
        );
        let direct = Command::new("python3").arg("-c").arg(&script).output().unwrap();
        prop_assert!(direct.status.success());
        prop_assert_eq!(out.stdout.as_bytes(), &direct.stdout[..]);
        prop_assert_eq!(out.stderr.as_bytes(), &direct.stderr[..]);
    }

    #[test]
    fn snapshot_covers_every_name(vals in prop::collection::vec((0..5usize, any::<bool>()), 1..8)) {
        let rt = rt();
        for (n, serializable) in &vals {
            let name = NAMES[*n];
            let expr = if *serializable { format!("{{'k': [{n}, 'x']}}") } else { "(lambda: 1)".to_string() };
            rt.execute_cell(&format!("{name} = {expr}")).unwrap();
        }
        let snap = rt.snapshot().unwrap();
        let mut covered: Vec<String> = snap.entries.iter().map(|e| e.name.clone())
            .chain(snap.skipped.iter().map(|s| s.name.clone())).collect();
        covered.sort();
        let mut names = rt.names();
        names.sort();
        prop_assert_eq!(covered, names);
        let back = restore(&snap, RuntimeConfig::default()).unwrap();
        for e in &snap.entries {
            prop_assert!(values_equal(&rt.get_variable(&e.name).unwrap(), &back.get_variable(&e.name).unwrap()));
        }
        let entries = |r: &RuntimeHandle| r.list_entries().into_iter()
            .filter(|e| snap.entries.iter().any(|s| s.name == e.name)).collect::<Vec<_>>();
        prop_assert_eq!(entries(&rt), back.list_entries());
    }
}
